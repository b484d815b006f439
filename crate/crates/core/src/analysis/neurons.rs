use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{ClassLcaTensor, LcaMatrix};
use crate::error::{Error, Result};
use crate::nn::LayerLayout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpecialization {
    pub layer: usize,
    pub top_k: usize,
    pub threshold: f64,
    pub neurons: usize,
    /// Neurons that helped no class at all.
    pub excluded: usize,
    pub specialized: usize,
    /// specialized / (neurons − excluded); 0 when nothing was counted.
    pub fraction: f64,
}

/// Share of a neuron's helped amount coming from its `top_k` classes; `None`
/// when it helped nothing.
pub fn top_k_ratio(helped: &[f64], top_k: usize) -> Option<f64> {
    let mut pos: Vec<f64> = helped.iter().copied().filter(|h| *h > 0.0).collect();
    let total: f64 = pos.iter().sum();
    if total <= 0.0 {
        return None;
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    Some(pos.iter().take(top_k).sum::<f64>() / total)
}

/// Per layer, the fraction of neurons whose top `top_k` classes account for
/// more than `threshold` of the amount the neuron helped.
pub fn neuron_specialization(
    tensor: &ClassLcaTensor,
    layout: &LayerLayout,
    top_k: usize,
    threshold: f64,
) -> Result<Vec<LayerSpecialization>> {
    if tensor.neurons != layout.num_neurons() {
        return Err(Error::Contract(format!(
            "tensor tracks {} neurons, layout has {}",
            tensor.neurons,
            layout.num_neurons()
        )));
    }
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let offsets = layout.neuron_offsets();
    Ok((0..layout.num_layers())
        .map(|l| {
            let width = layout.widths()[l + 1];
            let (mut excluded, mut specialized) = (0, 0);
            let mut helped = vec![0.0; tensor.classes];
            for n in offsets[l]..offsets[l] + width {
                for (c, h) in helped.iter_mut().enumerate() {
                    *h = tensor.helped(c, n);
                }
                match top_k_ratio(&helped, top_k) {
                    None => excluded += 1,
                    Some(r) if r > threshold => specialized += 1,
                    Some(_) => {}
                }
            }
            let counted = width - excluded;
            LayerSpecialization {
                layer: l,
                top_k,
                threshold,
                neurons: width,
                excluded,
                specialized,
                fraction: if counted == 0 {
                    0.0
                } else {
                    specialized as f64 / counted as f64
                },
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanioLayer {
    pub layer: usize,
    /// Mean pairwise correlation within rows (weights into one output unit).
    pub same_output: Option<f64>,
    /// Mean pairwise correlation within columns (weights out of one input).
    pub same_input: Option<f64>,
    /// Baseline over groups with no shared row or column.
    pub fake: Option<f64>,
    pub fake_group_size: usize,
    /// Kernel weights skipped because their cumulative LCA never varied.
    pub constant_weights: usize,
}

/// Accumulates Σ_t (Σ_{i∈g} z_i(t))² for groups of unit-norm series.
struct GroupAcc {
    sum: Vec<f64>,
    sq: Vec<f64>,
    members: Vec<usize>,
}

impl GroupAcc {
    fn new(groups: usize) -> Self {
        Self {
            sum: vec![0.0; groups],
            sq: vec![0.0; groups],
            members: vec![0; groups],
        }
    }

    fn close_step(&mut self) {
        for (q, s) in self.sq.iter_mut().zip(self.sum.iter_mut()) {
            *q += *s * *s;
            *s = 0.0;
        }
    }

    /// Mean over groups (≥ 2 members) of the mean pairwise correlation
    /// (‖Σz‖² − n) / (n (n − 1)).
    fn mean_correlation(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .sq
            .iter()
            .zip(&self.members)
            .filter(|(_, n)| **n >= 2)
            .map(|(q, &n)| {
                let n = n as f64;
                (q - n) / (n * (n - 1.0))
            })
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Pearson correlations between cumulative LCA series Σ_{s≤t} A[s, i] of
/// kernel weights sharing an output row or an input column, against "fake
/// nodes" of min(fan_in, fan_out) weights with pairwise distinct rows and
/// columns.  Two passes over the matrix; no per-weight series is stored.
pub fn fanio_correlation(lca: &LcaMatrix, layout: &LayerLayout, seed: u64) -> Result<Vec<FanioLayer>> {
    if lca.params() != layout.len() {
        return Err(Error::Contract("matrix does not match layout".into()));
    }
    if lca.steps() < 3 {
        return Err(Error::Contract("correlations need at least 3 iterations".into()));
    }
    let k = lca.params();

    // Pass 1: mean and centred sum of squares of every cumulative series.
    let mut cum = vec![0.0; k];
    let mut mean = vec![0.0; k];
    let mut m2 = vec![0.0; k];
    for (t, row) in lca.rows().enumerate() {
        let n = (t + 1) as f64;
        for i in 0..k {
            cum[i] += row[i];
            let d = cum[i] - mean[i];
            mean[i] += d / n;
            m2[i] += d * (cum[i] - mean[i]);
        }
    }
    let scale: Vec<f64> = m2.iter().map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct LayerPlan {
        offset: usize,
        fan_in: usize,
        rows: GroupAcc,
        cols: GroupAcc,
        fake: GroupAcc,
        /// (local index, fake group)
        fake_members: Vec<(usize, usize)>,
        fake_size: usize,
        constant: usize,
    }
    let mut plans: Vec<LayerPlan> = (0..layout.num_layers())
        .map(|l| {
            let e = layout.kernel(l);
            let (fo, fi) = (e.fan_out, e.fan_in);
            let mut rows = GroupAcc::new(fo);
            let mut cols = GroupAcc::new(fi);
            let mut constant = 0;
            for o in 0..fo {
                for i in 0..fi {
                    if scale[e.offset + o * fi + i] > 0.0 {
                        rows.members[o] += 1;
                        cols.members[i] += 1;
                    } else {
                        constant += 1;
                    }
                }
            }
            let size = fo.min(fi);
            let groups = fo + fi;
            let mut fake = GroupAcc::new(groups);
            let mut fake_members = Vec::with_capacity(groups * size);
            let mut rp: Vec<usize> = (0..fo).collect();
            let mut cp: Vec<usize> = (0..fi).collect();
            for g in 0..groups {
                rp.shuffle(&mut rng);
                cp.shuffle(&mut rng);
                for j in 0..size {
                    let local = rp[j] * fi + cp[j];
                    if scale[e.offset + local] > 0.0 {
                        fake_members.push((local, g));
                        fake.members[g] += 1;
                    }
                }
            }
            LayerPlan {
                offset: e.offset,
                fan_in: fi,
                rows,
                cols,
                fake,
                fake_members,
                fake_size: size,
                constant,
            }
        })
        .collect();

    // Pass 2: standardized series summed into each group, squared per step.
    cum.fill(0.0);
    let mut z = vec![0.0; k];
    for row in lca.rows() {
        for i in 0..k {
            cum[i] += row[i];
            z[i] = (cum[i] - mean[i]) * scale[i];
        }
        for p in &mut plans {
            let n = p.rows.sum.len() * p.fan_in;
            let zl = &z[p.offset..p.offset + n];
            for (o, chunk) in zl.chunks_exact(p.fan_in).enumerate() {
                p.rows.sum[o] += chunk.iter().sum::<f64>();
                for (c, v) in p.cols.sum.iter_mut().zip(chunk) {
                    *c += v;
                }
            }
            for &(local, g) in &p.fake_members {
                p.fake.sum[g] += zl[local];
            }
            p.rows.close_step();
            p.cols.close_step();
            p.fake.close_step();
        }
    }
    Ok(plans
        .iter()
        .enumerate()
        .map(|(l, p)| FanioLayer {
            layer: l,
            same_output: p.rows.mean_correlation(),
            same_input: p.cols.mean_correlation(),
            fake: p.fake.mean_correlation(),
            fake_group_size: p.fake_size,
            constant_weights: p.constant,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::analysis::help::tests::matrix;

    #[test]
    fn ratios() {
        assert_eq!(top_k_ratio(&[0.0, 2.0, 0.0], 1), Some(1.0));
        let uniform = vec![1.0; 10];
        assert!((top_k_ratio(&uniform, 1).unwrap() - 0.1).abs() < 1e-12);
        assert!((top_k_ratio(&uniform, 3).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(top_k_ratio(&[0.0, 0.0], 1), None);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn matches_explicit_pairwise_means() {
        // [3, 2]: kernel 2x3 at 0..6, bias 6..8
        let layout = LayerLayout::for_widths(&[3, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let m = matrix(rows.clone());
        let r = fanio_correlation(&m, &layout, 1).unwrap();
        let series: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let mut c = 0.0;
                rows.iter().map(|row| {
                    c += row[i];
                    c
                })
                .collect()
            })
            .collect();
        let row_mean = (pearson(&series[0], &series[1])
            + pearson(&series[0], &series[2])
            + pearson(&series[1], &series[2])
            + pearson(&series[3], &series[4])
            + pearson(&series[3], &series[5])
            + pearson(&series[4], &series[5]))
            / 6.0;
        assert!((r[0].same_output.unwrap() - row_mean).abs() < 1e-10);
        let col_mean = (0..3).map(|i| pearson(&series[i], &series[3 + i])).sum::<f64>() / 3.0;
        assert!((r[0].same_input.unwrap() - col_mean).abs() < 1e-10);
        assert_eq!(r[0].fake_group_size, 2);
    }

    #[test]
    fn duplicated_input_gives_unit_correlation() {
        let layout = LayerLayout::for_widths(&[2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // every weight fed by input i follows input i's walk
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let s: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let mut r = vec![0.0; 9];
                for o in 0..3 {
                    r[o * 2] = s[0];
                    r[o * 2 + 1] = 0.5 * s[1];
                }
                r
            })
            .collect();
        let r = fanio_correlation(&matrix(rows), &layout, 0).unwrap();
        assert!((r[0].same_input.unwrap() - 1.0).abs() < 1e-12);
        assert!(r[0].same_output.unwrap() < 1.0);
    }

    #[test]
    fn constant_series_are_skipped() {
        let layout = LayerLayout::for_widths(&[2, 2]).unwrap();
        let mut rows = vec![vec![0.0; 6]; 10];
        for (t, r) in rows.iter_mut().enumerate() {
            r[0] = (t as f64).sin();
            r[1] = (t as f64).cos();
        }
        let r = fanio_correlation(&matrix(rows), &layout, 0).unwrap();
        assert_eq!(r[0].constant_weights, 2);
        assert!(r[0].same_output.is_some());
        assert_eq!(r[0].same_input, None);
    }
}
