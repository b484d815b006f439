//! Forward and reverse passes of the dense ReLU / softmax network over one
//! shard of examples.  All arithmetic is 64-bit.

use super::dataset::Dataset;
use super::layout::LayerLayout;
use crate::error::{Error, Result};

/// Unnormalized sums over one shard: Σ loss and Σ ∇loss.
pub(crate) struct ShardSums {
    pub loss: f64,
    pub grad: Option<Vec<f64>>,
}

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Transpose of a `(rows, cols)` row-major block.
fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub(crate) fn shard_sums(
    theta: &[f64],
    layout: &LayerLayout,
    data: &Dataset,
    idx: &[usize],
    want_grad: bool,
) -> Result<ShardSums> {
    let widths = layout.widths();
    let depth = layout.num_layers();
    let n = idx.len();
    let d = widths[0];
    let sparse = data.sparse();

    // Input rows are only materialized for the dense path.
    let x = if sparse.is_none() {
        let mut x = Vec::with_capacity(n * d);
        for &r in idx {
            x.extend_from_slice(data.row(r));
        }
        x
    } else {
        Vec::new()
    };
    let w0t = sparse.map(|_| {
        let k = layout.kernel(0);
        transpose(&theta[k.range()], k.fan_out, k.fan_in)
    });

    // acts[l] is the input to layer l (post-ReLU for l > 0); acts[0] stays
    // empty on the sparse path.
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(depth);
    acts.push(x);
    let mut z = Vec::new();
    for l in 0..depth {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let kern = &theta[layout.kernel(l).range()];
        let bias = &theta[layout.bias(l).range()];
        z = Vec::with_capacity(n * fan_out);
        for _ in 0..n {
            z.extend_from_slice(bias);
        }
        match (l, sparse, &w0t) {
            (0, Some(sp), Some(w0t)) => {
                for (r, &row) in idx.iter().enumerate() {
                    let zr = &mut z[r * fan_out..(r + 1) * fan_out];
                    let (cols, vals) = sp.row(row);
                    for (&p, &v) in cols.iter().zip(vals) {
                        let wrow = &w0t[p as usize * fan_out..(p as usize + 1) * fan_out];
                        for (zo, w) in zr.iter_mut().zip(wrow) {
                            *zo += v * w;
                        }
                    }
                }
            }
            _ => {
                // z (n x out) += input (n x in) . kernelᵀ (in x out)
                gemm(
                    n,
                    fan_in,
                    fan_out,
                    &acts[l],
                    (fan_in, 1),
                    kern,
                    (1, fan_in),
                    1.0,
                    &mut z,
                    (fan_out, 1),
                );
            }
        }
        if l + 1 < depth {
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            acts.push(std::mem::take(&mut z));
        }
    }

    // Softmax cross-entropy; z now holds the logits and becomes dL/dlogits.
    let classes = widths[depth];
    let mut loss = 0.0;
    for (r, &row) in idx.iter().enumerate() {
        let logits = &mut z[r * classes..(r + 1) * classes];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in logits.iter() {
            denom += (v - max).exp();
        }
        let lse = max + denom.ln();
        let y = data.labels()[row] as usize;
        let example_loss = lse - logits[y];
        if !example_loss.is_finite() {
            return Err(Error::numeric(
                format!("non-finite loss for example {row}"),
                None,
            ));
        }
        loss += example_loss;
        if want_grad {
            for v in logits.iter_mut() {
                *v = (*v - lse).exp();
            }
            logits[y] -= 1.0;
        }
    }
    if !want_grad {
        return Ok(ShardSums { loss, grad: None });
    }

    let mut grad = vec![0.0; layout.len()];
    let mut delta = z;
    for l in (0..depth).rev() {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let kern_range = layout.kernel(l).range();
        let bias_range = layout.bias(l).range();
        {
            let gb = &mut grad[bias_range];
            for r in 0..n {
                for (g, dv) in gb.iter_mut().zip(&delta[r * fan_out..(r + 1) * fan_out]) {
                    *g += dv;
                }
            }
        }
        match (l, sparse) {
            (0, Some(sp)) => {
                let mut gwt = vec![0.0; fan_in * fan_out];
                for (r, &row) in idx.iter().enumerate() {
                    let dr = &delta[r * fan_out..(r + 1) * fan_out];
                    let (cols, vals) = sp.row(row);
                    for (&p, &v) in cols.iter().zip(vals) {
                        let g = &mut gwt[p as usize * fan_out..(p as usize + 1) * fan_out];
                        for (go, dv) in g.iter_mut().zip(dr) {
                            *go += v * dv;
                        }
                    }
                }
                let gk = &mut grad[kern_range.clone()];
                for o in 0..fan_out {
                    for p in 0..fan_in {
                        gk[o * fan_in + p] += gwt[p * fan_out + o];
                    }
                }
            }
            _ => {
                // dW (out x in) += deltaᵀ (out x n) . input (n x in)
                gemm(
                    fan_out,
                    n,
                    fan_in,
                    &delta,
                    (1, fan_out),
                    &acts[l],
                    (fan_in, 1),
                    1.0,
                    &mut grad[kern_range.clone()],
                    (fan_in, 1),
                );
            }
        }
        if l > 0 {
            let kern = &theta[kern_range];
            let mut prev = vec![0.0; n * fan_in];
            // prev (n x in) = delta (n x out) . W (out x in)
            gemm(
                n,
                fan_out,
                fan_in,
                &delta,
                (fan_out, 1),
                kern,
                (fan_in, 1),
                0.0,
                &mut prev,
                (fan_in, 1),
            );
            for (p, a) in prev.iter_mut().zip(&acts[l]) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    Ok(ShardSums {
        loss,
        grad: Some(grad),
    })
}
