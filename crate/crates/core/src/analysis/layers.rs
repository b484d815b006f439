use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

use crate::engine::LcaMatrix;
use crate::error::{Error, Result};
use crate::nn::LayerLayout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTotals {
    pub names: Vec<String>,
    /// Σ_t Σ_{i in layer} A[t, i], biases folded into their kernel layer.
    pub totals: Vec<f64>,
    pub grand_total: f64,
}

impl LayerTotals {
    pub fn from_totals(layout: &LayerLayout, totals: Vec<f64>) -> Self {
        Self {
            names: (0..layout.num_layers()).map(|l| layout.layer_name(l)).collect(),
            grand_total: totals.iter().sum(),
            totals,
        }
    }

    /// -1, 0 or +1 per layer.
    pub fn signs(&self) -> Vec<i8> {
        self.totals
            .iter()
            .map(|v| if *v < 0.0 { -1 } else if *v > 0.0 { 1 } else { 0 })
            .collect()
    }
}

pub fn layer_totals(lca: &LcaMatrix, layout: &LayerLayout) -> LayerTotals {
    let series = layer_series(lca, layout);
    LayerTotals::from_totals(layout, series.iter().map(|s| s.iter().sum()).collect())
}

/// Instantaneous layer LCA: per layer, Σ_{i in layer} A[t, i] for every t.
pub fn layer_series(lca: &LcaMatrix, layout: &LayerLayout) -> Vec<Vec<f64>> {
    let ranges = layout.layer_ranges();
    let mut out = vec![Vec::with_capacity(lca.steps()); ranges.len()];
    for t in 0..lca.steps() {
        let row = lca.row(t);
        for (s, r) in out.iter_mut().zip(&ranges) {
            s.push(row[r.clone()].iter().sum());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSignificance {
    pub layer: usize,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub t_statistic: f64,
    /// Two-sided one-sample Student t test against 0.
    pub p_value: f64,
    pub negative: usize,
    pub positive: usize,
    /// Two-sided sign test, zeros dropped.
    pub sign_p_value: f64,
}

/// Per-layer location tests of run totals against zero.
pub fn layer_significance(samples: &[LayerTotals]) -> Result<Vec<LayerSignificance>> {
    if samples.len() < 3 {
        return Err(Error::Contract(format!(
            "layer significance needs at least 3 runs, got {}",
            samples.len()
        )));
    }
    let layers = samples[0].totals.len();
    if samples.iter().any(|s| s.totals.len() != layers) {
        return Err(Error::Contract("runs disagree on the number of layers".into()));
    }
    (0..layers)
        .map(|l| {
            let xs: Vec<f64> = samples.iter().map(|s| s.totals[l]).collect();
            let (t, p) = one_sample_t(&xs);
            let negative = xs.iter().filter(|v| **v < 0.0).count();
            let positive = xs.iter().filter(|v| **v > 0.0).count();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Ok(LayerSignificance {
                layer: l,
                runs: xs.len(),
                mean,
                std: var.sqrt(),
                t_statistic: t,
                p_value: p,
                negative,
                positive,
                sign_p_value: sign_test(negative, positive),
            })
        })
        .collect()
}

/// (t, two-sided p) for H0: mean = 0.
pub fn one_sample_t(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        };
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("df >= 2");
    (t, (2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// Two-sided exact binomial sign test.
pub fn sign_test(negative: usize, positive: usize) -> f64 {
    let n = negative + positive;
    if n == 0 {
        return 1.0;
    }
    let k = negative.min(positive) as u64;
    let b = Binomial::new(0.5, n as u64).expect("valid binomial");
    (2.0 * b.cdf(k)).min(1.0)
}
