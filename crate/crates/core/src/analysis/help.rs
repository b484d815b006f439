use serde::{Deserialize, Serialize};

use crate::engine::{LcaMatrix, LcaSink, StepOutcome};
use crate::error::Result;
use crate::nn::LayerLayout;

/// Helped / hurt / zero counts at one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelpCounts {
    pub helped: usize,
    pub hurt: usize,
    pub zero: usize,
}

impl HelpCounts {
    pub fn total(&self) -> usize {
        self.helped + self.hurt + self.zero
    }

    fn pct(&self, n: usize) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            100.0 * n as f64 / self.total() as f64
        }
    }

    pub fn pct_helped(&self) -> f64 {
        self.pct(self.helped)
    }

    pub fn pct_hurt(&self) -> f64 {
        self.pct(self.hurt)
    }

    pub fn pct_zero(&self) -> f64 {
        self.pct(self.zero)
    }

    /// Helped share of the nonzero entries, percent; `None` when all are zero.
    pub fn pct_helped_nonzero(&self) -> Option<f64> {
        let nz = self.helped + self.hurt;
        (nz > 0).then(|| 100.0 * self.helped as f64 / nz as f64)
    }

    fn add(&mut self, o: &HelpCounts) {
        self.helped += o.helped;
        self.hurt += o.hurt;
        self.zero += o.zero;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelpStats {
    pub zero_tol: f64,
    pub per_iteration: Vec<HelpCounts>,
    /// Mean over iterations of the helped share of nonzero entries, percent.
    pub overall_pct_helped: f64,
    /// Share of all (t, i) entries that are zero, percent.
    pub overall_pct_zero: f64,
    /// Helped share of nonzero entries pooled over each layer's parameters
    /// and all iterations, percent.
    pub per_layer_pct_helped: Vec<f64>,
    /// Per parameter: helped iterations / nonzero iterations, `None` when the
    /// parameter never had nonzero LCA.
    pub per_weight_help_fraction: Vec<Option<f64>>,
}

fn classify(v: f64, zero_tol: f64) -> i8 {
    if v < -zero_tol {
        1
    } else if v > zero_tol {
        -1
    } else {
        0
    }
}

/// Streaming counterpart of [`helping_stats`].
#[derive(Debug, Clone)]
pub struct HelpSink {
    zero_tol: f64,
    layer_of: Vec<usize>,
    per_layer: Vec<HelpCounts>,
    helped_iters: Vec<u32>,
    nonzero_iters: Vec<u32>,
    per_iteration: Vec<HelpCounts>,
    total: HelpCounts,
}

impl HelpSink {
    pub fn new(layout: &LayerLayout, zero_tol: f64) -> Self {
        Self {
            zero_tol,
            layer_of: layout.layer_of_each(),
            per_layer: vec![HelpCounts::default(); layout.num_layers()],
            helped_iters: vec![0; layout.len()],
            nonzero_iters: vec![0; layout.len()],
            per_iteration: Vec::new(),
            total: HelpCounts::default(),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        let mut c = HelpCounts::default();
        for (i, &v) in row.iter().enumerate() {
            let lc = &mut self.per_layer[self.layer_of[i]];
            match classify(v, self.zero_tol) {
                1 => {
                    c.helped += 1;
                    lc.helped += 1;
                    self.helped_iters[i] += 1;
                    self.nonzero_iters[i] += 1;
                }
                -1 => {
                    c.hurt += 1;
                    lc.hurt += 1;
                    self.nonzero_iters[i] += 1;
                }
                _ => {
                    c.zero += 1;
                    lc.zero += 1;
                }
            }
        }
        self.total.add(&c);
        self.per_iteration.push(c);
    }

    pub fn finish(self) -> HelpStats {
        let shares: Vec<f64> = self
            .per_iteration
            .iter()
            .filter_map(|c| c.pct_helped_nonzero())
            .collect();
        let overall_pct_helped = if shares.is_empty() {
            0.0
        } else {
            shares.iter().sum::<f64>() / shares.len() as f64
        };
        HelpStats {
            zero_tol: self.zero_tol,
            overall_pct_zero: if self.total.total() == 0 {
                100.0
            } else {
                self.total.pct_zero()
            },
            per_iteration: self.per_iteration,
            overall_pct_helped,
            per_layer_pct_helped: self
                .per_layer
                .iter()
                .map(|c| c.pct_helped_nonzero().unwrap_or(0.0))
                .collect(),
            per_weight_help_fraction: self
                .helped_iters
                .iter()
                .zip(&self.nonzero_iters)
                .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
                .collect(),
        }
    }
}

impl LcaSink for HelpSink {
    fn on_step(&mut self, step: &StepOutcome) -> Result<()> {
        self.push_row(&step.allocation);
        Ok(())
    }
}

/// Count helping (A < −zero_tol), hurting (A > zero_tol) and zero entries.
pub fn helping_stats(lca: &LcaMatrix, layout: &LayerLayout, zero_tol: f64) -> HelpStats {
    let mut sink = HelpSink::new(layout, zero_tol);
    for row in lca.rows().take(lca.steps()) {
        sink.push_row(row);
    }
    sink.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges over [0, 1]; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Parameters with no nonzero LCA at any iteration.
    pub excluded_all_zero: usize,
}

impl Histogram {
    /// Index of the fullest bin (lowest index on ties).
    pub fn mode_bin(&self) -> Option<usize> {
        let max = *self.counts.iter().max()?;
        (max > 0).then(|| self.counts.iter().position(|&c| c == max).unwrap())
    }

    /// Lower and upper edge of the fullest bin.
    pub fn mode_interval(&self) -> Option<(f64, f64)> {
        self.mode_bin().map(|b| (self.edges[b], self.edges[b + 1]))
    }
}

/// Histogram of the per-weight help fractions over `bins` equal bins.
pub fn help_fraction_histogram(stats: &HelpStats, bins: usize) -> Histogram {
    let bins = bins.max(1);
    let mut counts = vec![0; bins];
    let mut excluded = 0;
    for f in &stats.per_weight_help_fraction {
        match f {
            Some(f) => counts[((f * bins as f64) as usize).min(bins - 1)] += 1,
            None => excluded += 1,
        }
    }
    Histogram {
        edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        counts,
        excluded_all_zero: excluded,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::engine::{LcaOptions, RunSummary};

    pub(crate) fn matrix(rows: Vec<Vec<f64>>) -> LcaMatrix {
        let steps = rows.len();
        let params = rows[0].len();
        let total: f64 = rows.iter().flatten().sum();
        let summary = RunSummary {
            steps,
            params,
            options: LcaOptions::default(),
            iter_error: vec![0.0; steps],
            depth: vec![0; steps],
            flagged: vec![false; steps],
            losses: (0..=steps).map(|t| -(t as f64)).collect(),
            allocated_total: total,
        };
        LcaMatrix::from_parts(summary, rows.concat()).unwrap()
    }

    #[test]
    fn triples_and_exclusions() {
        let layout = LayerLayout::for_widths(&[1, 2]).unwrap();
        let m = matrix(vec![
            vec![-1.0, 2.0, 0.0, 0.0],
            vec![-1.0, -2.0, 0.0, 3.0],
            vec![1.0, -2.0, 0.0, -3.0],
        ]);
        let s = helping_stats(&m, &layout, 0.0);
        for c in &s.per_iteration {
            assert!((c.pct_helped() + c.pct_hurt() + c.pct_zero() - 100.0).abs() < 1e-9);
        }
        // per-iteration nonzero shares: 1/2, 2/3, 2/3
        assert!((s.overall_pct_helped - 100.0 * (0.5 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert_eq!(s.per_weight_help_fraction[2], None);
        assert_eq!(s.per_weight_help_fraction[0], Some(2.0 / 3.0));
        let h = help_fraction_histogram(&s, 10);
        assert_eq!(h.excluded_all_zero, 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
    }

    #[test]
    fn all_zero_matrix() {
        let layout = LayerLayout::for_widths(&[2, 1]).unwrap();
        let m = matrix(vec![vec![0.0; 3]; 4]);
        let s = helping_stats(&m, &layout, 0.0);
        assert_eq!(s.overall_pct_zero, 100.0);
        assert!(s.per_iteration.iter().all(|c| c.pct_zero() == 100.0));
        assert_eq!(help_fraction_histogram(&s, 20).mode_bin(), None);
    }

    #[test]
    fn monotone_descent_helps_always() {
        let layout = LayerLayout::for_widths(&[1, 1]).unwrap();
        let m = matrix(vec![vec![-1e-3, 0.0]; 50]);
        let s = helping_stats(&m, &layout, 0.0);
        assert_eq!(s.per_weight_help_fraction[0], Some(1.0));
        let h = help_fraction_histogram(&s, 20);
        assert_eq!(h.mode_bin(), Some(19));
    }
}
