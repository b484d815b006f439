use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layout::LayerLayout;
use crate::error::{Error, Result};

/// Flat vector of all trainable parameters, tied to its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<LayerLayout>,
}

impl ParamVector {
    pub fn new(layout: Arc<LayerLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Contract(format!(
                "parameter vector has {} values, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { values, layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => {
                let site = self.layout.locate(i)?;
                Err(Error::numeric(
                    format!(
                        "non-finite parameter at index {i} ({})",
                        self.layout.entries()[site.entry].name
                    ),
                    None,
                ))
            }
        }
    }

    /// Round every value through `f32`, as when stored with 32-bit precision.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }
}

/// Full-training-set gradient together with a fingerprint of where it was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    pub eval_point: u64,
}

impl Gradient {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// FNV-1a over the bit patterns of a parameter vector.
pub fn fingerprint(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// He-normal kernels (std = sqrt(2 / fan_in)) and zero biases.
pub fn init_params(arch: &[usize], seed: u64) -> Result<ParamVector> {
    if arch.is_empty() {
        return Err(Error::Config("empty architecture".into()));
    }
    let layout = Arc::new(LayerLayout::for_widths(arch)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.len()];
    for l in 0..layout.num_layers() {
        let k = layout.kernel(l);
        let std = (2.0 / k.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is positive and finite");
        for v in &mut values[k.range()] {
            *v = normal.sample(&mut rng);
        }
    }
    ParamVector::new(layout, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_fc_size() {
        let p = init_params(&[784, 100, 50, 10], 1).unwrap();
        assert_eq!(p.len(), 84_060);
    }

    #[test]
    fn biases_are_zero() {
        let p = init_params(&[2, 2], 7).unwrap();
        assert_eq!(&p.values()[4..6], &[0.0, 0.0]);
        assert!(p.values()[..4].iter().all(|v| *v != 0.0));
    }

    #[test]
    fn deterministic_for_seed() {
        let a = init_params(&[3, 5, 2], 42).unwrap();
        let b = init_params(&[3, 5, 2], 42).unwrap();
        let c = init_params(&[3, 5, 2], 43).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn empty_arch_is_config_error() {
        assert!(matches!(init_params(&[], 0), Err(Error::Config(_))));
    }

    #[test]
    fn kernel_std_matches_he_normal() {
        let p = init_params(&[400, 300], 3).unwrap();
        let k = &p.values()[..120_000];
        let mean = k.iter().sum::<f64>() / k.len() as f64;
        let var = k.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k.len() as f64;
        let want = 2.0 / 400.0;
        assert!((var - want).abs() / want < 0.02, "var {var} vs {want}");
    }
}
