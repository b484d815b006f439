use serde::{Deserialize, Serialize};

use crate::engine::{LcaSink, StepOutcome};
use crate::error::{Error, Result};
use crate::nn::{Evaluation, LayerLayout};
use crate::trajectory::SnapshotSource;

/// Sign changes and observed span for a group of parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignPeriod {
    pub changes: u64,
    /// Σ over parameters of (last nonzero index − first nonzero index).
    pub span: u64,
}

impl SignPeriod {
    /// Mean iterations per sign change; `None` without any change.
    pub fn period(&self) -> Option<f64> {
        (self.changes > 0).then(|| self.span as f64 / self.changes as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignChangeSummary {
    pub series_len: usize,
    pub per_layer: Vec<SignPeriod>,
    pub overall: SignPeriod,
}

/// Streams per-parameter sign sequences; exact zeros neither count as a
/// change nor reset the previous sign.
#[derive(Debug, Clone)]
pub struct SignChangeCounter {
    last_sign: Vec<i8>,
    first: Vec<u32>,
    last: Vec<u32>,
    changes: Vec<u32>,
    seen: u32,
}

impl SignChangeCounter {
    pub fn new(params: usize) -> Self {
        Self {
            last_sign: vec![0; params],
            first: vec![0; params],
            last: vec![0; params],
            changes: vec![0; params],
            seen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.seen as usize
    }

    pub fn is_empty(&self) -> bool {
        self.seen == 0
    }

    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.last_sign.len() {
            return Err(Error::Contract(format!(
                "sign counter tracks {} values, got {}",
                self.last_sign.len(),
                v.len()
            )));
        }
        let t = self.seen;
        for (i, &x) in v.iter().enumerate() {
            let s = if x > 0.0 {
                1
            } else if x < 0.0 {
                -1
            } else {
                continue;
            };
            match self.last_sign[i] {
                0 => self.first[i] = t,
                prev if prev != s => self.changes[i] += 1,
                _ => {}
            }
            self.last_sign[i] = s;
            self.last[i] = t;
        }
        self.seen += 1;
        Ok(())
    }

    pub fn summary(&self, layout: &LayerLayout) -> SignChangeSummary {
        let mut per_layer = vec![SignPeriod::default(); layout.num_layers()];
        for (l, r) in layout.layer_ranges().into_iter().enumerate() {
            for i in r {
                if self.last_sign[i] != 0 {
                    per_layer[l].changes += self.changes[i] as u64;
                    per_layer[l].span += (self.last[i] - self.first[i]) as u64;
                }
            }
        }
        let overall = per_layer.iter().fold(SignPeriod::default(), |a, p| SignPeriod {
            changes: a.changes + p.changes,
            span: a.span + p.span,
        });
        SignChangeSummary {
            series_len: self.len(),
            per_layer,
            overall,
        }
    }
}

/// Tracks sign changes of the full-data gradient at each snapshot while the
/// integrator runs.
#[derive(Debug, Clone)]
pub struct GradientSignSink {
    counter: SignChangeCounter,
}

impl GradientSignSink {
    pub fn new(params: usize) -> Self {
        Self {
            counter: SignChangeCounter::new(params),
        }
    }

    pub fn summary(&self, layout: &LayerLayout) -> SignChangeSummary {
        self.counter.summary(layout)
    }
}

impl LcaSink for GradientSignSink {
    fn on_endpoint(&mut self, _t: usize, eval: &Evaluation) -> Result<()> {
        self.counter.push(&eval.gradient)
    }

    fn on_step(&mut self, _step: &StepOutcome) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationReport {
    /// Direction changes of θ_{t+1} − θ_t.
    pub weight: SignChangeSummary,
    /// Sign crossings of the full-data gradient g_t, when recorded.
    pub gradient: Option<SignChangeSummary>,
}

/// Weight-direction periods from the trajectory, gradient periods from the
/// integrator's record.
pub fn oscillation_counts<S: SnapshotSource + ?Sized>(
    traj: &S,
    layout: &LayerLayout,
    gradient: Option<&SignChangeSummary>,
) -> Result<OscillationReport> {
    let steps = traj.num_iterations();
    if steps < 2 {
        return Err(Error::Contract(format!(
            "oscillation counts need at least 3 snapshots, trajectory has {}",
            steps + 1
        )));
    }
    if traj.num_params() != layout.len() {
        return Err(Error::Contract("trajectory does not match layout".into()));
    }
    let mut counter = SignChangeCounter::new(layout.len());
    let mut prev = traj.snapshot_vec(0)?;
    let mut next = vec![0.0; prev.len()];
    let mut d = vec![0.0; prev.len()];
    for t in 0..steps {
        traj.snapshot_into(t + 1, &mut next)?;
        for ((o, n), p) in d.iter_mut().zip(&next).zip(&prev) {
            *o = n - p;
        }
        counter.push(&d)?;
        std::mem::swap(&mut prev, &mut next);
    }
    Ok(OscillationReport {
        weight: counter.summary(layout),
        gradient: gradient.cloned(),
    })
}
