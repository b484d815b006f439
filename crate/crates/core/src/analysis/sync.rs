use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strict local minima of `series`, the `k` most negative, in time order.
pub fn detect_peaks(series: &[f64], k: usize) -> Vec<usize> {
    if series.len() < 3 {
        return Vec::new();
    }
    let mut cand: Vec<usize> = (1..series.len() - 1)
        .filter(|&t| series[t] < series[t - 1] && series[t] < series[t + 1])
        .collect();
    cand.sort_by(|&a, &b| series[a].total_cmp(&series[b]).then(a.cmp(&b)));
    cand.truncate(k);
    cand.sort_unstable();
    cand
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentOptions {
    pub min_shift: i64,
    pub max_shift: i64,
    pub trials: usize,
    /// Fraction of series in a group that must peak together.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for AlignmentOptions {
    fn default() -> Self {
        Self {
            min_shift: -2,
            max_shift: 2,
            trials: 10_000,
            threshold: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    /// Peak sets, grouped (one group per class, or a single group).
    pub peaks: Vec<Vec<Vec<usize>>>,
    /// Aligned iterations per group.
    pub aligned: Vec<Vec<usize>>,
    /// Mean number of aligned iterations per group.
    pub observed: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    /// Baseline statistic of every trial.
    pub baseline: Vec<f64>,
    pub p_value: f64,
}

fn required(series: usize, threshold: f64) -> usize {
    ((threshold * series as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Iterations at which at least `need` of the (shifted) peak sets have a peak.
fn aligned_in_group(sets: &[Vec<usize>], shifts: &[i64], need: usize, buf: &mut Vec<i64>) -> Vec<i64> {
    buf.clear();
    for (s, &d) in sets.iter().zip(shifts) {
        buf.extend(s.iter().map(|&t| t as i64 + d));
    }
    buf.sort_unstable();
    let mut out = Vec::new();
    let mut i = 0;
    while i < buf.len() {
        let mut j = i;
        while j < buf.len() && buf[j] == buf[i] {
            j += 1;
        }
        if j - i >= need {
            out.push(buf[i]);
        }
        i = j;
    }
    out
}

/// Count iterations where a threshold fraction of series peak together and
/// compare with independent random shifts of every series.
///
/// Peak sets must not contain duplicates.  Each outer entry of `groups` is
/// treated separately (e.g. one per class) and the statistic is the mean
/// aligned count over groups.
pub fn alignment_test(groups: &[Vec<Vec<usize>>], opts: &AlignmentOptions) -> Result<SyncReport> {
    if groups.is_empty() || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Contract("alignment needs at least two series per group".into()));
    }
    if opts.min_shift > opts.max_shift || !(opts.threshold > 0.0 && opts.threshold <= 1.0) {
        return Err(Error::Config(format!(
            "invalid alignment options: shifts {}..={}, threshold {}",
            opts.min_shift, opts.max_shift, opts.threshold
        )));
    }
    let mut buf = Vec::new();
    let mut aligned = Vec::with_capacity(groups.len());
    let mut total = 0usize;
    for g in groups {
        let need = required(g.len(), opts.threshold);
        let a = aligned_in_group(g, &vec![0; g.len()], need, &mut buf);
        total += a.len();
        aligned.push(a.into_iter().map(|t| t as usize).collect::<Vec<_>>());
    }
    let observed = total as f64 / groups.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut baseline = Vec::with_capacity(opts.trials);
    let mut shifts = Vec::new();
    for _ in 0..opts.trials {
        let mut count = 0usize;
        for g in groups {
            shifts.clear();
            shifts.extend((0..g.len()).map(|_| rng.random_range(opts.min_shift..=opts.max_shift)));
            count += aligned_in_group(g, &shifts, required(g.len(), opts.threshold), &mut buf).len();
        }
        baseline.push(count as f64 / groups.len() as f64);
    }
    let n = baseline.len().max(1) as f64;
    let baseline_mean = baseline.iter().sum::<f64>() / n;
    let baseline_std = (baseline.iter().map(|b| (b - baseline_mean).powi(2)).sum::<f64>() / n).sqrt();
    let exceed = baseline.iter().filter(|b| **b >= observed).count();
    Ok(SyncReport {
        peaks: groups.to_vec(),
        aligned,
        observed,
        baseline_mean,
        baseline_std,
        p_value: (1 + exceed) as f64 / (1 + opts.trials) as f64,
        baseline,
    })
}
