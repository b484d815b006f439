use std::ops::Range;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::engine::LcaMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailOptions {
    /// Cutoff in fitted standard deviations.
    pub sigma_cut: f64,
    /// Leave exact zeros (dead inputs, frozen weights) out of the pool.
    pub exclude_zeros: bool,
}

impl Default for TailOptions {
    fn default() -> Self {
        Self {
            sigma_cut: 2.0,
            exclude_zeros: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailWindow {
    pub start: usize,
    pub end: usize,
    pub samples: usize,
    pub mean: f64,
    pub std: f64,
    /// Fisher excess kurtosis (biased moments); `None` for a constant window.
    pub excess_kurtosis: Option<f64>,
    /// D'Agostino kurtosis test z score and two-sided p value.
    pub kurtosis_z: Option<f64>,
    pub kurtosis_p: Option<f64>,
    /// Σ|A| beyond the cutoff over the same quantity for the fitted Gaussian.
    pub tail_mass_ratio: Option<f64>,
}

/// Central moments m2, m4 and the mean.
fn moments(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for x in xs {
        let d = (x - mean) * (x - mean);
        m2 += d;
        m4 += d * d;
    }
    (mean, m2 / n, m4 / n)
}

/// Fisher excess kurtosis m4 / m2² − 3; `None` when the sample is constant.
pub fn excess_kurtosis(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let (_, m2, m4) = moments(xs);
    (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0)
}

/// D'Agostino–Pearson kurtosis test (Anscombe–Glynn transform).  Returns
/// (z, two-sided p).  Needs n ≥ 5.
pub fn kurtosis_test(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.len() < 5 {
        return None;
    }
    kurtosis_test_from(xs.len(), excess_kurtosis(xs)? + 3.0)
}

/// [`kurtosis_test`] from the sample size and the (non-excess) moment ratio b2.
fn kurtosis_test_from(n: usize, b2: f64) -> Option<(f64, f64)> {
    if n < 5 {
        return None;
    }
    let n = n as f64;
    let e = 3.0 * (n - 1.0) / (n + 1.0);
    let varb2 = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0) * (n + 1.0) * (n + 3.0) * (n + 5.0));
    let x = (b2 - e) / varb2.sqrt();
    let sqrtbeta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0))
        * (6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0))).sqrt();
    let a = 6.0 + 8.0 / sqrtbeta1 * (2.0 / sqrtbeta1 + (1.0 + 4.0 / (sqrtbeta1 * sqrtbeta1)).sqrt());
    let term1 = 1.0 - 2.0 / (9.0 * a);
    let denom = 1.0 + x * (2.0 / (a - 4.0)).sqrt();
    if denom == 0.0 {
        return None;
    }
    let term2 = denom.signum() * ((1.0 - 2.0 / a) / denom.abs()).cbrt();
    let z = (term1 - term2) / (2.0 / (9.0 * a)).sqrt();
    let std = Normal::standard();
    Some((z, 2.0 * std.sf(z.abs())))
}

/// E[|μ + σZ| ; a < Z < b] for standard normal Z.
fn abs_partial_expectation(mu: f64, sigma: f64, a: f64, b: f64) -> f64 {
    let std = Normal::standard();
    let pdf = |z: f64| if z.is_infinite() { 0.0 } else { std.pdf(z) };
    let signed = |a: f64, b: f64| mu * (std.cdf(b) - std.cdf(a)) + sigma * (pdf(a) - pdf(b));
    let z0 = -mu / sigma;
    if z0 <= a {
        signed(a, b)
    } else if z0 >= b {
        -signed(a, b)
    } else {
        -signed(a, z0) + signed(z0, b)
    }
}

/// Σ|x| over samples more than `cut` fitted σ from the mean, divided by the
/// expected value of that sum under N(mean, σ²) with the same sample count.
pub fn tail_mass_ratio(xs: &[f64], cut: f64) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let (mean, m2, _) = moments(xs);
    tail_ratio(|| xs.iter().copied(), xs.len(), mean, m2.sqrt(), cut)
}

fn tail_ratio<F, I>(pass: F, n: usize, mean: f64, sigma: f64, cut: f64) -> Option<f64>
where
    F: Fn() -> I,
    I: Iterator<Item = f64>,
{
    if sigma == 0.0 || n < 2 {
        return None;
    }
    let observed: f64 = pass()
        .filter(|x| (x - mean).abs() > cut * sigma)
        .map(f64::abs)
        .sum();
    let per_sample = abs_partial_expectation(mean, sigma, f64::NEG_INFINITY, -cut)
        + abs_partial_expectation(mean, sigma, cut, f64::INFINITY);
    Some(observed / (n as f64 * per_sample))
}

/// Statistics of pooled A values over each iteration window.  The pool is
/// streamed from the matrix, never copied.
pub fn tail_stats(lca: &LcaMatrix, windows: &[Range<usize>], opts: &TailOptions) -> Result<Vec<TailWindow>> {
    if windows.is_empty() {
        return Err(Error::Contract("tail statistics need at least one window".into()));
    }
    windows
        .iter()
        .map(|w| {
            if w.is_empty() || w.end > lca.steps() {
                return Err(Error::Contract(format!(
                    "window {}..{} is empty or beyond T={}",
                    w.start,
                    w.end,
                    lca.steps()
                )));
            }
            let k = lca.params();
            let vals = &lca.values()[w.start * k..w.end * k];
            let skip_zeros = opts.exclude_zeros;
            Ok(pooled_stats(
                || vals.iter().copied().filter(move |v| !(skip_zeros && *v == 0.0)),
                w.clone(),
                opts,
            ))
        })
        .collect()
}

pub fn window_stats(pool: &[f64], w: Range<usize>, opts: &TailOptions) -> TailWindow {
    pooled_stats(|| pool.iter().copied(), w, opts)
}

fn pooled_stats<F, I>(pass: F, w: Range<usize>, opts: &TailOptions) -> TailWindow
where
    F: Fn() -> I,
    I: Iterator<Item = f64>,
{
    let (n, sum) = pass().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    let nf = n as f64;
    let mean = if n == 0 { f64::NAN } else { sum / nf };
    let (m2, m4) = pass().fold((0.0, 0.0), |(a, b), x| {
        let d = (x - mean) * (x - mean);
        (a + d, b + d * d)
    });
    let (m2, m4) = (m2 / nf, m4 / nf);
    let kurt = (n >= 2 && m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0);
    let test = kurt.and_then(|k| kurtosis_test_from(n, k + 3.0));
    let std = if n == 0 { f64::NAN } else { m2.sqrt() };
    TailWindow {
        start: w.start,
        end: w.end,
        samples: n,
        mean,
        std,
        excess_kurtosis: kurt,
        kurtosis_z: test.map(|t| t.0),
        kurtosis_p: test.map(|t| t.1),
        tail_mass_ratio: if n >= 2 {
            tail_ratio(&pass, n, mean, std, opts.sigma_cut)
        } else {
            None
        },
    }
}

/// `count` equal iteration windows covering 0..steps (the last absorbs the
/// remainder).
pub fn equal_windows(steps: usize, count: usize) -> Vec<Range<usize>> {
    let count = count.clamp(1, steps.max(1));
    let size = steps / count;
    (0..count)
        .map(|i| i * size..if i + 1 == count { steps } else { (i + 1) * size })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    #[test]
    fn scipy_reference_values() {
        let x: Vec<f64> = (0..50).map(|i| ((i * i) % 17) as f64 - 8.0 + 0.01 * i as f64).collect();
        assert!((excess_kurtosis(&x).unwrap() - -1.4763252502874935).abs() < 1e-12);
        let (z, p) = kurtosis_test(&x).unwrap();
        assert!((z - -6.136970435184446).abs() < 1e-9);
        assert!((p - 8.41100314345868e-10).abs() / 8.41100314345868e-10 < 1e-6);

        let y: Vec<f64> = (0..200).map(|i| ((i % 7) as f64).powi(3) * 0.1 - 2.0).collect();
        let (z, p) = kurtosis_test(&y).unwrap();
        assert!((excess_kurtosis(&y).unwrap() - -0.2095243159993423).abs() < 1e-12);
        assert!((z - -0.4586922032778633).abs() < 1e-9);
        assert!((p - 0.6464552137400168).abs() < 1e-9);

        let mut w: Vec<f64> = (0..100).map(|i| (((i * 7) % 11) as f64 - 5.0) * 0.1).collect();
        w[3] = 30.0;
        w[50] = -25.0;
        assert!((excess_kurtosis(&w).unwrap() - 47.912352876687535).abs() < 1e-9);
        let (z, p) = kurtosis_test(&w).unwrap();
        assert!((z - 7.603485194913817).abs() < 1e-9);
        assert!((p - 2.882602441627529e-14).abs() / 2.882602441627529e-14 < 1e-5);
    }

    #[test]
    fn gaussian_fixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let xs: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(excess_kurtosis(&xs).unwrap().abs() < 0.1);
        let r = tail_mass_ratio(&xs, 2.0).unwrap();
        assert!((r - 1.0).abs() < 0.02, "{r}");
    }

    #[test]
    fn gaussian_expectation_with_offset_mean() {
        // brute-force midpoint quadrature of |μ+σz| φ(z) over |z| > 2
        let (mu, sigma): (f64, f64) = (0.7, 1.3);
        let std = Normal::standard();
        let mut brute = 0.0;
        let h = 1e-4;
        let mut z = 2.0 + h / 2.0;
        while z < 12.0 {
            brute += ((mu + sigma * z).abs() + (mu - sigma * z).abs()) * std.pdf(z) * h;
            z += h;
        }
        let exact = abs_partial_expectation(mu, sigma, f64::NEG_INFINITY, -2.0)
            + abs_partial_expectation(mu, sigma, 2.0, f64::INFINITY);
        assert!((brute - exact).abs() < 1e-8);
        let straddle = abs_partial_expectation(mu, sigma, -3.0, 3.0);
        let mut b2 = 0.0;
        let mut z = -3.0 + h / 2.0;
        while z < 3.0 {
            b2 += (mu + sigma * z).abs() * std.pdf(z) * h;
            z += h;
        }
        assert!((straddle - b2).abs() < 1e-7);
    }

    #[test]
    fn constant_window_is_undefined() {
        let s = window_stats(&[0.5; 40], 0..4, &TailOptions::default());
        assert_eq!(s.excess_kurtosis, None);
        assert_eq!(s.tail_mass_ratio, None);
        assert_eq!(s.kurtosis_p, None);
    }

    #[test]
    fn windows_cover_range() {
        let w = equal_windows(880, 4);
        assert_eq!(w, vec![0..220, 220..440, 440..660, 660..880]);
        assert_eq!(equal_windows(10, 3).last().unwrap().end, 10);
        assert_eq!(equal_windows(2, 5).len(), 2);
    }
}
