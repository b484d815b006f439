//! Mini-batch optimizers with per-layer overrides.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dataset, Gradient, LayerLayout, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// Per-layer adjustments, keyed by dense layer name (`dense_0`, `dense_1`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    #[serde(default = "one")]
    pub lr_scale: f64,
    #[serde(default)]
    pub frozen: bool,
    /// Replaces the global momentum (Adam: β1) for this layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum_override: Option<f64>,
    /// Freeze the layer for every step whose index is at least this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen_from: Option<usize>,
}

impl Default for LayerOverride {
    fn default() -> Self {
        Self {
            lr_scale: 1.0,
            frozen: false,
            momentum_override: None,
            frozen_from: None,
        }
    }
}

fn one() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_layer: BTreeMap<String, LayerOverride>,
}

impl OptimConfig {
    pub fn sgd(lr: f64, momentum: f64, batch_size: usize) -> Self {
        Self {
            kind: OptimKind::Sgd,
            lr,
            momentum,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            batch_size,
            per_layer: BTreeMap::new(),
        }
    }

    pub fn adam(lr: f64, batch_size: usize) -> Self {
        Self {
            kind: OptimKind::Adam,
            ..Self::sgd(lr, 0.0, batch_size)
        }
    }

    pub fn with_layer(mut self, name: impl Into<String>, o: LayerOverride) -> Self {
        self.per_layer.insert(name.into(), o);
        self
    }

    pub fn validate(&self, layout: &LayerLayout) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.kind == OptimKind::Adam {
            for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
                }
            }
            if !(self.adam_eps > 0.0) {
                return Err(Error::Config("adam_eps must be > 0".into()));
            }
        }
        for (name, o) in &self.per_layer {
            if layout.layer_index(name).is_none() {
                return Err(Error::Config(format!(
                    "per_layer override for unknown layer '{name}' (have dense_0..dense_{})",
                    layout.num_layers() - 1
                )));
            }
            if !(o.lr_scale >= 0.0 && o.lr_scale.is_finite()) {
                return Err(Error::Config(format!(
                    "{name}: lr_scale must be >= 0, got {}",
                    o.lr_scale
                )));
            }
            if let Some(m) = o.momentum_override {
                if !(0.0..1.0).contains(&m) {
                    return Err(Error::Config(format!(
                        "{name}: momentum_override must be in [0, 1), got {m}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Optimizer buffers.  For SGD `first` is the velocity; for Adam `first` and
/// `second` are the moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step_count: usize,
}

impl OptimState {
    pub fn new(k: usize) -> Self {
        Self {
            first: vec![0.0; k],
            second: vec![0.0; k],
            step_count: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerRule {
    lr: f64,
    momentum: f64,
    frozen: bool,
    frozen_from: Option<usize>,
}

/// Configured optimizer bound to a parameter layout.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimConfig,
    layout: Arc<LayerLayout>,
    rules: Vec<LayerRule>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, layout: Arc<LayerLayout>) -> Result<Self> {
        cfg.validate(&layout)?;
        let base_momentum = match cfg.kind {
            OptimKind::Sgd => cfg.momentum,
            OptimKind::Adam => cfg.adam_beta1,
        };
        let rules = (0..layout.num_layers())
            .map(|l| {
                let o = cfg
                    .per_layer
                    .get(&layout.layer_name(l))
                    .cloned()
                    .unwrap_or_default();
                LayerRule {
                    lr: cfg.lr * o.lr_scale,
                    momentum: o.momentum_override.unwrap_or(base_momentum),
                    frozen: o.frozen,
                    frozen_from: o.frozen_from,
                }
            })
            .collect();
        Ok(Self { cfg, layout, rules })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn init_state(&self) -> OptimState {
        OptimState::new(self.layout.len())
    }

    /// Whether `layer` is held fixed at step `t`.
    pub fn is_frozen(&self, layer: usize, t: usize) -> bool {
        let r = &self.rules[layer];
        r.frozen || r.frozen_from.is_some_and(|from| t >= from)
    }

    /// Apply one update in place.  On a non-finite result neither `theta`
    /// nor `state` is modified.
    pub fn step(&self, theta: &mut ParamVector, state: &mut OptimState, grad: &Gradient) -> Result<()> {
        let k = self.layout.len();
        if theta.len() != k || grad.len() != k || state.first.len() != k || state.second.len() != k {
            return Err(Error::Contract(format!(
                "optimizer expects length {k}: theta {}, grad {}, buffers {}/{}",
                theta.len(),
                grad.len(),
                state.first.len(),
                state.second.len()
            )));
        }
        let t = state.step_count;
        if let Some(i) = grad.values.iter().position(|g| !g.is_finite()) {
            let site = self.layout.locate(i)?;
            return Err(Error::numeric(
                format!("non-finite gradient in {}", self.layout.layer_name(site.layer)),
                Some(t),
            ));
        }
        let mut new_theta = theta.values().to_vec();
        let mut first = state.first.clone();
        let mut second = state.second.clone();
        for (l, range) in self.layout.layer_ranges().into_iter().enumerate() {
            if self.is_frozen(l, t) {
                continue;
            }
            let rule = &self.rules[l];
            match self.cfg.kind {
                OptimKind::Sgd => {
                    for i in range.clone() {
                        let v = rule.momentum * first[i] + grad.values[i];
                        first[i] = v;
                        new_theta[i] -= rule.lr * v;
                    }
                }
                OptimKind::Adam => {
                    let (b1, b2) = (rule.momentum, self.cfg.adam_beta2);
                    let step = (t + 1) as i32;
                    let c1 = 1.0 - b1.powi(step);
                    let c2 = 1.0 - b2.powi(step);
                    for i in range.clone() {
                        let g = grad.values[i];
                        let m = b1 * first[i] + (1.0 - b1) * g;
                        let v = b2 * second[i] + (1.0 - b2) * g * g;
                        first[i] = m;
                        second[i] = v;
                        let m_hat = if c1 > 0.0 { m / c1 } else { m };
                        let v_hat = v / c2;
                        new_theta[i] -= rule.lr * m_hat / (v_hat.sqrt() + self.cfg.adam_eps);
                    }
                }
            }
            if new_theta[range.clone()].iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    format!("non-finite update in {}", self.layout.layer_name(l)),
                    Some(t),
                ));
            }
        }
        theta.values_mut().copy_from_slice(&new_theta);
        state.first = first;
        state.second = second;
        state.step_count += 1;
        Ok(())
    }
}

/// One update step in value form: returns the new parameters and state.
pub fn step(
    theta: &ParamVector,
    state: &OptimState,
    grad: &Gradient,
    cfg: &OptimConfig,
) -> Result<(ParamVector, OptimState)> {
    let opt = Optimizer::new(cfg.clone(), theta.layout().clone())?;
    let mut theta = theta.clone();
    let mut state = state.clone();
    opt.step(&mut theta, &mut state, grad)?;
    Ok((theta, state))
}

/// Momentum whose mean information lag is `delay` steps: `delay / (delay + 1)`.
pub fn momentum_from_delay(delay: f64) -> Result<f64> {
    if !(delay >= 0.0 && delay.is_finite()) {
        return Err(Error::Config(format!(
            "delay must be a finite non-negative number, got {delay}"
        )));
    }
    Ok(delay / (delay + 1.0))
}

/// Uniform sampling without replacement inside an epoch, reshuffled at every
/// epoch boundary.  The last batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("cannot sample from an empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            pos: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if batch_size > self.order.len() {
            return Err(Error::Config(format!(
                "batch_size {batch_size} exceeds dataset size {}",
                self.order.len()
            )));
        }
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Ok(batch)
    }
}

/// Draw the next mini-batch of `data` from `sampler`.
pub fn sample_minibatch(data: &Dataset, batch_size: usize, sampler: &mut EpochSampler) -> Result<Vec<usize>> {
    if sampler.order.len() != data.len() {
        return Err(Error::Contract(format!(
            "sampler covers {} examples, dataset has {}",
            sampler.order.len(),
            data.len()
        )));
    }
    sampler.next_batch(batch_size)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::nn::init_params;

    fn grad(values: Vec<f64>) -> Gradient {
        Gradient {
            values,
            eval_point: 0,
        }
    }

    #[test]
    fn plain_sgd_step() {
        let theta = init_params(&[2, 2], 1).unwrap();
        let g = grad(vec![1.0, -2.0, 0.5, 0.25, 4.0, -8.0]);
        let cfg = OptimConfig::sgd(0.5, 0.0, 1);
        let (new, _) = step(&theta, &OptimState::new(6), &g, &cfg).unwrap();
        for i in 0..6 {
            assert_eq!(new.values()[i], theta.values()[i] - 0.5 * g.values[i]);
        }
    }

    #[test]
    fn frozen_layer_is_bitwise_fixed() {
        let theta = init_params(&[3, 4, 2], 1).unwrap();
        let cfg = OptimConfig::sgd(0.1, 0.9, 1).with_layer(
            "dense_1",
            LayerOverride {
                frozen: true,
                ..Default::default()
            },
        );
        let opt = Optimizer::new(cfg, theta.layout().clone()).unwrap();
        let mut state = opt.init_state();
        let mut th = theta.clone();
        for _ in 0..5 {
            opt.step(&mut th, &mut state, &grad(vec![0.3; theta.len()])).unwrap();
        }
        let r = theta.layout().layer_range(1);
        assert_eq!(&th.values()[r.clone()], &theta.values()[r.clone()]);
        assert!(state.first[r].iter().all(|v| *v == 0.0));
        let r0 = theta.layout().layer_range(0);
        assert_ne!(&th.values()[r0.clone()], &theta.values()[r0]);
    }

    #[test]
    fn freeze_from_step() {
        let theta = init_params(&[2, 1], 1).unwrap();
        let cfg = OptimConfig::sgd(0.1, 0.0, 1).with_layer(
            "dense_0",
            LayerOverride {
                frozen_from: Some(2),
                ..Default::default()
            },
        );
        let opt = Optimizer::new(cfg, theta.layout().clone()).unwrap();
        let mut state = opt.init_state();
        let mut th = theta.clone();
        let g = grad(vec![1.0; 3]);
        opt.step(&mut th, &mut state, &g).unwrap();
        opt.step(&mut th, &mut state, &g).unwrap();
        let after_two = th.clone();
        opt.step(&mut th, &mut state, &g).unwrap();
        assert_eq!(th, after_two);
        assert_ne!(after_two, theta);
    }

    #[test]
    fn momentum_steady_state_is_geometric_sum() {
        let theta = init_params(&[1, 1], 0).unwrap();
        let opt = Optimizer::new(OptimConfig::sgd(0.01, 0.9, 1), theta.layout().clone()).unwrap();
        let mut state = opt.init_state();
        let mut th = theta;
        let g = grad(vec![2.0, 2.0]);
        let mut last = 0.0;
        for _ in 0..400 {
            let before = th.values()[0];
            opt.step(&mut th, &mut state, &g).unwrap();
            last = before - th.values()[0];
        }
        // lr * g * Σ 0.9^k = lr * g / (1 - 0.9)
        let want = 0.01 * 2.0 / (1.0 - 0.9);
        assert!((last - want).abs() < 1e-9, "{last} vs {want}");
    }

    #[test]
    fn unit_scale_matches_global_config() {
        let theta = init_params(&[4, 3, 2], 5).unwrap();
        let plain = OptimConfig::sgd(0.05, 0.9, 1);
        let scaled = plain.clone().with_layer("dense_0", LayerOverride::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a_opt = Optimizer::new(plain, theta.layout().clone()).unwrap();
        let b_opt = Optimizer::new(scaled, theta.layout().clone()).unwrap();
        let (mut a, mut b) = (theta.clone(), theta.clone());
        let (mut sa, mut sb) = (a_opt.init_state(), b_opt.init_state());
        for _ in 0..20 {
            let g = grad((0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
            a_opt.step(&mut a, &mut sa, &g).unwrap();
            b_opt.step(&mut b, &mut sb, &g).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn lr_scale_and_momentum_override_apply_per_layer() {
        let theta = init_params(&[1, 1, 1], 5).unwrap();
        let cfg = OptimConfig::sgd(1.0, 0.5, 1).with_layer(
            "dense_1",
            LayerOverride {
                lr_scale: 0.1,
                momentum_override: Some(0.0),
                ..Default::default()
            },
        );
        let opt = Optimizer::new(cfg, theta.layout().clone()).unwrap();
        let mut state = opt.init_state();
        let mut th = theta.clone();
        let g = grad(vec![1.0; 4]);
        opt.step(&mut th, &mut state, &g).unwrap();
        opt.step(&mut th, &mut state, &g).unwrap();
        // layer 0: 1 + 1.5 ; layer 1: 0.1 * (1 + 1)
        assert!((theta.values()[0] - th.values()[0] - 2.5).abs() < 1e-12);
        assert!((theta.values()[2] - th.values()[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_names_layer_and_iteration() {
        let theta = init_params(&[2, 2, 2], 5).unwrap();
        let opt = Optimizer::new(OptimConfig::sgd(0.1, 0.0, 1), theta.layout().clone()).unwrap();
        let mut state = opt.init_state();
        let mut th = theta.clone();
        let mut g = vec![0.0; theta.len()];
        g[7] = f64::NAN;
        let err = opt.step(&mut th, &mut state, &grad(g)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dense_1") && msg.contains("iteration 0"), "{msg}");
        assert_eq!(th, theta);
    }

    #[test]
    fn overflowing_update_is_numeric_error() {
        let theta = init_params(&[1, 1], 5).unwrap();
        let opt = Optimizer::new(OptimConfig::sgd(1e308, 0.0, 1), theta.layout().clone()).unwrap();
        let mut state = opt.init_state();
        let mut th = theta;
        let err = opt.step(&mut th, &mut state, &grad(vec![1e308, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn config_validation() {
        let layout = LayerLayout::for_widths(&[2, 2]).unwrap();
        assert!(OptimConfig::sgd(0.0, 0.0, 1).validate(&layout).is_err());
        assert!(OptimConfig::sgd(0.1, 1.0, 1).validate(&layout).is_err());
        assert!(OptimConfig::sgd(0.1, 0.5, 0).validate(&layout).is_err());
        let bad = OptimConfig::sgd(0.1, 0.5, 1).with_layer("dense_7", LayerOverride::default());
        assert!(bad.validate(&layout).is_err());
    }

    #[test]
    fn delay_to_momentum() {
        assert_eq!(momentum_from_delay(9.0).unwrap(), 0.9);
        assert_eq!(momentum_from_delay(0.0).unwrap(), 0.0);
        assert_eq!(momentum_from_delay(1.0).unwrap(), 0.5);
        assert!(matches!(momentum_from_delay(-1.0), Err(Error::Config(_))));
        let table = [0.0, 0.5, 0.667, 0.75, 0.8, 0.833, 0.857, 0.875, 0.889, 0.9];
        let mut prev = -1.0;
        for (d, want) in table.iter().enumerate() {
            let m = momentum_from_delay(d as f64).unwrap();
            assert!((m - want).abs() < 5e-4);
            assert!(m > prev);
            prev = m;
        }
    }

    #[test]
    fn full_batch_is_permutation() {
        let mut s = EpochSampler::new(17, 4).unwrap();
        let mut b = s.next_batch(17).unwrap();
        b.sort_unstable();
        assert_eq!(b, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_is_deterministic() {
        let mut a = EpochSampler::new(50, 9).unwrap();
        let mut b = EpochSampler::new(50, 9).unwrap();
        for _ in 0..30 {
            assert_eq!(a.next_batch(7).unwrap(), b.next_batch(7).unwrap());
        }
    }

    #[test]
    fn each_index_once_per_epoch() {
        let n = 23;
        let mut s = EpochSampler::new(n, 1).unwrap();
        let mut counts = vec![0; n];
        while s.epoch() < 50 {
            let before = s.epoch();
            let batch = s.next_batch(5).unwrap();
            if s.epoch() == 50 {
                break;
            }
            assert!(s.epoch() == before || s.epoch() == before + 1);
            for i in batch {
                counts[i] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 50), "{counts:?}");
    }

    #[test]
    fn zero_batch_rejected() {
        let data = Dataset::new("d", vec![0.0; 4], 1, vec![0, 0, 0, 0], 1).unwrap();
        let mut s = EpochSampler::new(4, 0).unwrap();
        assert!(sample_minibatch(&data, 0, &mut s).is_err());
        assert!(sample_minibatch(&data, 5, &mut s).is_err());
        assert_eq!(sample_minibatch(&data, 4, &mut s).unwrap().len(), 4);
    }

    proptest! {
        #[test]
        fn adam_step_bounded_by_lr(seed in 0u64..1000, lr in 1e-4f64..1.0) {
            let theta = init_params(&[3, 2], 0).unwrap();
            let opt = Optimizer::new(OptimConfig::adam(lr, 1), theta.layout().clone()).unwrap();
            let mut state = opt.init_state();
            let mut th = theta.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mags: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(0.01..10.0)).collect();
            for _ in 0..30 {
                let g: Vec<f64> = mags
                    .iter()
                    .map(|m| if rng.random::<bool>() { *m } else { -*m })
                    .collect();
                let before = th.values().to_vec();
                opt.step(&mut th, &mut state, &grad(g)).unwrap();
                for (a, b) in before.iter().zip(th.values()) {
                    prop_assert!((a - b).abs() <= lr * (1.0 + 1e-9));
                }
            }
        }
    }
}
