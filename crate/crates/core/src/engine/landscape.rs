use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{self, Dataset, Evaluation, LayerLayout, ParamVector};

/// A differentiable loss over a flat parameter vector.
pub trait Landscape: Sync {
    fn num_params(&self) -> usize;

    fn num_classes(&self) -> usize {
        1
    }

    /// Loss and gradient at `theta`.  With `per_class` the evaluation also
    /// carries class gradients whose sum is the returned gradient.
    fn evaluate(&self, theta: &[f64], per_class: bool) -> Result<Evaluation>;
}

/// Full-training-set cross-entropy of a dense network.
#[derive(Debug, Clone)]
pub struct MlpLandscape<'a> {
    data: &'a Dataset,
    layout: Arc<LayerLayout>,
}

impl<'a> MlpLandscape<'a> {
    pub fn new(data: &'a Dataset, layout: Arc<LayerLayout>) -> Result<Self> {
        if data.num_features() != layout.input_width() || data.num_classes() != layout.num_classes() {
            return Err(Error::Contract(format!(
                "dataset ({} features, {} classes) does not match architecture {:?}",
                data.num_features(),
                data.num_classes(),
                layout.widths()
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }
}

impl Landscape for MlpLandscape<'_> {
    fn num_params(&self) -> usize {
        self.layout.len()
    }

    fn num_classes(&self) -> usize {
        self.data.num_classes()
    }

    fn evaluate(&self, theta: &[f64], per_class: bool) -> Result<Evaluation> {
        let p = ParamVector::new(self.layout.clone(), theta.to_vec())?;
        nn::evaluate(&p, self.data, per_class)
    }
}

/// `L(θ) = ½ (θ − c)ᵀ H (θ − c) + offset` with symmetric `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLandscape {
    dim: usize,
    hessian: Vec<f64>,
    center: Vec<f64>,
    offset: f64,
}

impl QuadraticLandscape {
    pub fn new(hessian: Vec<f64>, center: Vec<f64>, offset: f64) -> Result<Self> {
        let dim = center.len();
        if hessian.len() != dim * dim {
            return Err(Error::Contract(format!(
                "hessian has {} entries, expected {dim}x{dim}",
                hessian.len()
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                if hessian[i * dim + j] != hessian[j * dim + i] {
                    return Err(Error::Contract("hessian must be symmetric".into()));
                }
            }
        }
        Ok(Self {
            dim,
            hessian,
            center,
            offset,
        })
    }

    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = theta.iter().zip(&self.center).map(|(t, c)| t - c).collect();
        (0..self.dim)
            .map(|i| {
                self.hessian[i * self.dim..(i + 1) * self.dim]
                    .iter()
                    .zip(&d)
                    .map(|(h, x)| h * x)
                    .sum()
            })
            .collect()
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let g = self.gradient(theta);
        let quad: f64 = g
            .iter()
            .zip(theta.iter().zip(&self.center))
            .map(|(g, (t, c))| g * (t - c))
            .sum();
        0.5 * quad + self.offset
    }
}

impl Landscape for QuadraticLandscape {
    fn num_params(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, theta: &[f64], per_class: bool) -> Result<Evaluation> {
        if theta.len() != self.dim {
            return Err(Error::Contract(format!(
                "point has {} coordinates, landscape has {}",
                theta.len(),
                self.dim
            )));
        }
        let gradient = self.gradient(theta);
        Ok(Evaluation {
            loss: self.loss(theta),
            class_gradients: per_class.then(|| vec![gradient.clone()]),
            gradient,
        })
    }
}
