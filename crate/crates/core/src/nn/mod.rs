//! Dense feed-forward classifier: layout, parameters, loss and exact
//! full-dataset gradients.
//!
//! Gradients are reduced deterministically: examples are cut into fixed-size
//! shards in the order given, shard sums are computed (possibly in parallel)
//! and then combined by a fixed pairwise tree.  The result therefore does not
//! depend on the number of worker threads.

mod dataset;
mod layout;
mod mlp;
mod params;

use rayon::prelude::*;

pub use dataset::Dataset;
pub use layout::{LayerEntry, LayerLayout, ParamKind, ParamSite};
pub use params::{fingerprint, init_params, Gradient, ParamVector};

use crate::error::{Error, Result};

/// Examples per reduction shard.
pub const SHARD_SIZE: usize = 256;

/// Loss and gradient evaluated at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// Per-class gradients, each normalized by the total example count.
    pub class_gradients: Option<Vec<Vec<f64>>>,
}

fn check_inputs(theta: &ParamVector, data: &Dataset, subset: Option<&[usize]>) -> Result<()> {
    let layout = theta.layout();
    if data.num_features() != layout.input_width() {
        return Err(Error::Contract(format!(
            "dataset has {} features but the network expects {}",
            data.num_features(),
            layout.input_width()
        )));
    }
    if data.num_classes() != layout.num_classes() {
        return Err(Error::Contract(format!(
            "dataset has {} classes but the network outputs {}",
            data.num_classes(),
            layout.num_classes()
        )));
    }
    data.check_subset(subset)?;
    theta.check_finite()
}

fn tree_reduce(mut parts: Vec<(f64, Vec<f64>)>, k: usize) -> (f64, Vec<f64>) {
    if parts.is_empty() {
        return (0.0, vec![0.0; k]);
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some((mut la, mut ga)) = it.next() {
            if let Some((lb, gb)) = it.next() {
                la += lb;
                for (a, b) in ga.iter_mut().zip(&gb) {
                    *a += b;
                }
            }
            next.push((la, ga));
        }
        parts = next;
    }
    parts.pop().unwrap()
}

/// Σ loss and Σ gradient over `idx`, unnormalized.
fn sums(theta: &ParamVector, data: &Dataset, idx: &[usize], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let layout = theta.layout();
    let parts = idx
        .par_chunks(SHARD_SIZE)
        .map(|chunk| {
            mlp::shard_sums(theta.values(), layout, data, chunk, want_grad)
                .map(|s| (s.loss, s.grad.unwrap_or_default()))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = if want_grad { layout.len() } else { 0 };
    Ok(tree_reduce(parts, k))
}

fn resolve<'a>(data: &Dataset, subset: Option<&'a [usize]>, all: &'a mut Vec<usize>) -> &'a [usize] {
    match subset {
        Some(s) => s,
        None => {
            *all = (0..data.len()).collect();
            all
        }
    }
}

/// Mean cross-entropy (nats) over `subset`, or over every example.
pub fn forward_loss(theta: &ParamVector, data: &Dataset, subset: Option<&[usize]>) -> Result<f64> {
    check_inputs(theta, data, subset)?;
    let mut all = Vec::new();
    let idx = resolve(data, subset, &mut all);
    if idx.is_empty() {
        return Err(Error::Data("loss over an empty example set".into()));
    }
    let (loss, _) = sums(theta, data, idx, false)?;
    Ok(loss / idx.len() as f64)
}

/// Exact gradient of [`forward_loss`] over the same examples.
pub fn full_gradient(theta: &ParamVector, data: &Dataset, subset: Option<&[usize]>) -> Result<Gradient> {
    Ok(loss_and_gradient(theta, data, subset)?.1)
}

/// [`forward_loss`] and [`full_gradient`] from a single pass.
pub fn loss_and_gradient(
    theta: &ParamVector,
    data: &Dataset,
    subset: Option<&[usize]>,
) -> Result<(f64, Gradient)> {
    check_inputs(theta, data, subset)?;
    let mut all = Vec::new();
    let idx = resolve(data, subset, &mut all);
    if idx.is_empty() {
        return Err(Error::Data("gradient over an empty example set".into()));
    }
    let (loss, mut grad) = sums(theta, data, idx, true)?;
    let scale = 1.0 / idx.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    check_gradient(&grad)?;
    Ok((
        loss * scale,
        Gradient {
            values: grad,
            eval_point: fingerprint(theta.values()),
        },
    ))
}

/// Per-class gradients `(1/N) Σ_{n: y_n = c} ∇ℓ_n`; they sum to the full
/// gradient.  Classes without examples get a zero gradient.
pub fn per_class_gradients(theta: &ParamVector, data: &Dataset) -> Result<Vec<Gradient>> {
    let eval = evaluate(theta, data, true)?;
    let point = fingerprint(theta.values());
    Ok(eval
        .class_gradients
        .unwrap()
        .into_iter()
        .map(|values| Gradient {
            values,
            eval_point: point,
        })
        .collect())
}

/// Loss and full gradient at `theta`; with `per_class` the gradient is
/// assembled from the per-class parts so they add up to it exactly in order.
pub fn evaluate(theta: &ParamVector, data: &Dataset, per_class: bool) -> Result<Evaluation> {
    if !per_class {
        let (loss, g) = loss_and_gradient(theta, data, None)?;
        return Ok(Evaluation {
            loss,
            gradient: g.values,
            class_gradients: None,
        });
    }
    check_inputs(theta, data, None)?;
    if data.is_empty() {
        return Err(Error::Data("gradient over an empty example set".into()));
    }
    let scale = 1.0 / data.len() as f64;
    let k = theta.len();
    let mut loss = 0.0;
    let mut total = vec![0.0; k];
    let mut classes = Vec::with_capacity(data.num_classes());
    for idx in data.class_index() {
        let (l, mut g) = if idx.is_empty() {
            (0.0, vec![0.0; k])
        } else {
            sums(theta, data, idx, true)?
        };
        loss += l;
        for (t, v) in total.iter_mut().zip(g.iter_mut()) {
            *v *= scale;
            *t += *v;
        }
        classes.push(g);
    }
    check_gradient(&total)?;
    Ok(Evaluation {
        loss: loss * scale,
        gradient: total,
        class_gradients: Some(classes),
    })
}

fn check_gradient(g: &[f64]) -> Result<()> {
    match g.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::numeric(
            format!("non-finite gradient component {i}"),
            None,
        )),
    }
}
