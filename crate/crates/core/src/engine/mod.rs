//! Loss change allocation along a trajectory.
//!
//! For each step θ_t → θ_{t+1} the change in loss is written as the path
//! integral of ∇L along the straight segment, split per coordinate:
//!
//! ```text
//! A[t, i] = (θ_{t+1} − θ_t)[i] · ḡ[i]
//! ```
//!
//! where ḡ is the composite-Simpson average of the full-dataset gradient over
//! 2^depth equal panels.  Panels are doubled until the residual
//! `ε_t = (L(θ_{t+1}) − L(θ_t)) − Σ_i A[t, i]` drops below the tolerance or
//! the depth cap is hit.  Gradients at θ_t are shared by the two steps that
//! touch it.

mod landscape;
mod lcam;

use serde::{Deserialize, Serialize};

pub use landscape::{Landscape, MlpLandscape, QuadraticLandscape};
pub use lcam::{
    load_matrix, read_lcam, read_sidecar, sidecar_path, LcamFile, LcamSidecar, LcamWriter, LCAM_MAGIC, LCAM_VERSION,
};

use crate::error::{Error, Result};
use crate::nn::{Evaluation, LayerLayout};
use crate::trajectory::SnapshotSource;

/// How the per-step gradient is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Adaptive composite Simpson (RK4 weights 1, 4, 1).
    Simpson,
    /// Gradient at the start of the step only; diagnostic.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LcaOptions {
    /// Absolute per-iteration residual target, nats.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Maximum refinement level (2^max_depth panels).
    #[serde(default = "default_max_depth")]
    pub max_depth: u8,
    /// Cumulative error gate, percent of the total loss change.
    #[serde(default = "default_gate")]
    pub gate_pct: f64,
    #[serde(default = "default_method")]
    pub method: Method,
}

fn default_tol() -> f64 {
    1e-3
}
fn default_max_depth() -> u8 {
    6
}
fn default_gate() -> f64 {
    1.0
}
fn default_method() -> Method {
    Method::Simpson
}

impl Default for LcaOptions {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_depth: default_max_depth(),
            gate_pct: default_gate(),
            method: default_method(),
        }
    }
}

impl LcaOptions {
    pub fn first_order() -> Self {
        Self {
            method: Method::FirstOrder,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_depth > 16 {
            return Err(Error::Config(format!(
                "max_depth {} is beyond any sensible refinement (<= 16)",
                self.max_depth
            )));
        }
        if !(self.gate_pct > 0.0) {
            return Err(Error::Config("gate_pct must be > 0".into()));
        }
        Ok(())
    }
}

/// Result of integrating one step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub t: usize,
    /// A[t, ·]
    pub allocation: Vec<f64>,
    /// Per-class allocations A_c[t, ·], when requested.
    pub class_allocation: Option<Vec<Vec<f64>>>,
    /// L(θ_{t+1}) − L(θ_t)
    pub loss_change: f64,
    /// ε_t = loss_change − Σ_i A[t, i]
    pub residual: f64,
    pub depth: u8,
    /// Depth cap reached with the residual still above tolerance.
    pub flagged: bool,
}

/// Receives results as the integrator walks the trajectory.
pub trait LcaSink {
    /// Loss and gradient at snapshot `t` (each snapshot is reported once).
    fn on_endpoint(&mut self, _t: usize, _eval: &Evaluation) -> Result<()> {
        Ok(())
    }

    fn on_step(&mut self, step: &StepOutcome) -> Result<()>;
}

impl<S: LcaSink + ?Sized> LcaSink for &mut S {
    fn on_endpoint(&mut self, t: usize, eval: &Evaluation) -> Result<()> {
        (**self).on_endpoint(t, eval)
    }

    fn on_step(&mut self, step: &StepOutcome) -> Result<()> {
        (**self).on_step(step)
    }
}

/// Forwards every event to each sink in turn.
pub struct FanOut<'a>(pub Vec<&'a mut dyn LcaSink>);

impl LcaSink for FanOut<'_> {
    fn on_endpoint(&mut self, t: usize, eval: &Evaluation) -> Result<()> {
        self.0.iter_mut().try_for_each(|s| s.on_endpoint(t, eval))
    }

    fn on_step(&mut self, step: &StepOutcome) -> Result<()> {
        self.0.iter_mut().try_for_each(|s| s.on_step(step))
    }
}

/// Per-iteration bookkeeping of a completed integration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub params: usize,
    pub options: LcaOptions,
    pub iter_error: Vec<f64>,
    pub depth: Vec<u8>,
    pub flagged: Vec<bool>,
    /// Full-dataset loss at every snapshot, θ_0..θ_T.
    pub losses: Vec<f64>,
    /// Σ_t Σ_i A[t, i], accumulated in 64-bit.
    pub allocated_total: f64,
}

impl RunSummary {
    pub fn loss_change(&self) -> f64 {
        self.losses[self.steps] - self.losses[0]
    }

    /// (Σ A − ΔL) / |ΔL| in percent; negative when the allocation claims a
    /// larger decrease than actually happened.
    pub fn cumulative_error_pct(&self) -> f64 {
        let dl = self.loss_change();
        let err = self.allocated_total - dl;
        if dl == 0.0 {
            if err == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(err)
            }
        } else {
            100.0 * err / dl.abs()
        }
    }

    pub fn mean_abs_iter_error(&self) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        self.iter_error.iter().map(|e| e.abs()).sum::<f64>() / self.steps as f64
    }

    /// The `n` iterations with the largest |ε_t|, largest first.
    pub fn worst_iterations(&self, n: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<usize> = (0..self.steps).collect();
        idx.sort_by(|&a, &b| self.iter_error[b].abs().total_cmp(&self.iter_error[a].abs()));
        idx.into_iter().take(n).map(|t| (t, self.iter_error[t])).collect()
    }

    pub fn depth_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.options.max_depth as usize + 1];
        for &d in &self.depth {
            h[d as usize] += 1;
        }
        h
    }

    /// Fail when |cumulative error| reaches the gate.
    pub fn check_gate(&self) -> Result<()> {
        let pct = self.cumulative_error_pct();
        if pct.abs() < self.options.gate_pct {
            Ok(())
        } else {
            Err(Error::LcaGate {
                cumulative_error_pct: pct,
                gate_pct: self.options.gate_pct,
                worst: self.worst_iterations(5),
            })
        }
    }
}

/// The T × K allocation matrix plus its error accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct LcaMatrix {
    pub summary: RunSummary,
    values: Vec<f64>,
}

impl LcaMatrix {
    pub fn from_parts(summary: RunSummary, values: Vec<f64>) -> Result<Self> {
        if values.len() != summary.steps * summary.params {
            return Err(Error::Contract(format!(
                "matrix has {} entries, expected {} x {}",
                values.len(),
                summary.steps,
                summary.params
            )));
        }
        Ok(Self { summary, values })
    }

    pub fn steps(&self) -> usize {
        self.summary.steps
    }

    pub fn params(&self) -> usize {
        self.summary.params
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let k = self.params();
        &self.values[t * k..(t + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.params().max(1))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.values[t * self.params() + i]
    }

    pub fn iter_error(&self) -> &[f64] {
        &self.summary.iter_error
    }

    pub fn depth(&self) -> &[u8] {
        &self.summary.depth
    }

    pub fn cumulative_error_pct(&self) -> f64 {
        self.summary.cumulative_error_pct()
    }

    /// Σ_t A[t, i] for every parameter.
    pub fn totals_per_param(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.params()];
        for row in self.rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }
}

/// Collects full rows in memory.
#[derive(Debug, Default)]
pub struct MatrixSink {
    values: Vec<f64>,
}

impl LcaSink for MatrixSink {
    fn on_step(&mut self, step: &StepOutcome) -> Result<()> {
        self.values.extend_from_slice(&step.allocation);
        Ok(())
    }
}

/// Sums allocations per dense layer (bias folded into its kernel layer).
#[derive(Debug, Clone)]
pub struct LayerTotalsSink {
    ranges: Vec<std::ops::Range<usize>>,
    round_f32: bool,
    pub totals: Vec<f64>,
    /// Per-iteration layer sums, T × L.
    pub per_iteration: Vec<Vec<f64>>,
}

impl LayerTotalsSink {
    pub fn new(layout: &LayerLayout) -> Self {
        Self {
            ranges: layout.layer_ranges(),
            round_f32: false,
            totals: vec![0.0; layout.num_layers()],
            per_iteration: Vec::new(),
        }
    }

    /// Sums the values as an `LCAM` file stores them (rounded through f32),
    /// so the totals match a later analysis of that file bit for bit.
    pub fn as_stored(layout: &LayerLayout) -> Self {
        Self {
            round_f32: true,
            ..Self::new(layout)
        }
    }
}

impl LcaSink for LayerTotalsSink {
    fn on_step(&mut self, step: &StepOutcome) -> Result<()> {
        let round = self.round_f32;
        let sums: Vec<f64> = self
            .ranges
            .iter()
            .map(|r| {
                step.allocation[r.clone()]
                    .iter()
                    .map(|&v| if round { v as f32 as f64 } else { v })
                    .sum()
            })
            .collect();
        for (t, s) in self.totals.iter_mut().zip(&sums) {
            *t += s;
        }
        self.per_iteration.push(sums);
        Ok(())
    }
}

/// How per-class allocations are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassAggregate {
    /// Full C × T × K.
    None,
    /// Summed within each dense layer: C × T × L.
    Layer,
}

/// Per-class allocations A_c[t, ·] with Σ_c A_c = A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLcaTensor {
    pub classes: usize,
    pub steps: usize,
    /// K for [`ClassAggregate::None`], number of layers for [`ClassAggregate::Layer`].
    pub width: usize,
    pub aggregate: ClassAggregate,
    /// Row-major C × T × width.
    pub values: Vec<f64>,
    /// Per class and neuron (output unit): Σ_t of the negative part of that
    /// neuron's class allocation, i.e. the amount it helped the class.
    /// Row-major C × neurons.
    pub neuron_helped: Vec<f64>,
    pub neurons: usize,
}

impl ClassLcaTensor {
    pub fn series(&self, class: usize, column: usize) -> Vec<f64> {
        (0..self.steps)
            .map(|t| self.values[(class * self.steps + t) * self.width + column])
            .collect()
    }

    pub fn get(&self, class: usize, t: usize, column: usize) -> f64 {
        self.values[(class * self.steps + t) * self.width + column]
    }

    pub fn helped(&self, class: usize, neuron: usize) -> f64 {
        self.neuron_helped[class * self.neurons + neuron]
    }
}

/// Builds a [`ClassLcaTensor`] from class allocations.
#[derive(Debug)]
pub struct ClassSink {
    aggregate: ClassAggregate,
    classes: usize,
    ranges: Vec<std::ops::Range<usize>>,
    neuron_of: Vec<usize>,
    neurons: usize,
    values: Vec<Vec<f64>>,
    neuron_helped: Vec<f64>,
    steps: usize,
    scratch: Vec<f64>,
}

impl ClassSink {
    pub fn new(layout: &LayerLayout, classes: usize, aggregate: ClassAggregate) -> Self {
        let neurons = layout.num_neurons();
        Self {
            aggregate,
            classes,
            ranges: layout.layer_ranges(),
            neuron_of: layout.neuron_of_each(),
            neurons,
            values: vec![Vec::new(); classes],
            neuron_helped: vec![0.0; classes * neurons],
            steps: 0,
            scratch: vec![0.0; neurons],
        }
    }

    pub fn finish(self) -> ClassLcaTensor {
        let width = match self.aggregate {
            ClassAggregate::None => self.neuron_of.len(),
            ClassAggregate::Layer => self.ranges.len(),
        };
        ClassLcaTensor {
            classes: self.classes,
            steps: self.steps,
            width,
            aggregate: self.aggregate,
            values: self.values.concat(),
            neuron_helped: self.neuron_helped,
            neurons: self.neurons,
        }
    }
}

impl LcaSink for ClassSink {
    fn on_step(&mut self, step: &StepOutcome) -> Result<()> {
        let per_class = step.class_allocation.as_ref().ok_or_else(|| {
            Error::Contract("class sink attached to a run without per-class gradients".into())
        })?;
        if per_class.len() != self.classes {
            return Err(Error::Contract(format!(
                "expected {} classes, step carries {}",
                self.classes,
                per_class.len()
            )));
        }
        for (c, alloc) in per_class.iter().enumerate() {
            match self.aggregate {
                ClassAggregate::None => self.values[c].extend_from_slice(alloc),
                ClassAggregate::Layer => {
                    for r in &self.ranges {
                        self.values[c].push(alloc[r.clone()].iter().sum());
                    }
                }
            }
            self.scratch.fill(0.0);
            for (v, &n) in alloc.iter().zip(&self.neuron_of) {
                self.scratch[n] += v;
            }
            let helped = &mut self.neuron_helped[c * self.neurons..(c + 1) * self.neurons];
            for (h, s) in helped.iter_mut().zip(&self.scratch) {
                if *s < 0.0 {
                    *h -= s;
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

fn interpolate(a: &[f64], b: &[f64], s: f64, out: &mut [f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = (1.0 - s) * x + s * y;
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

/// Running sums of gradients at composite-Simpson nodes.
struct NodeSums {
    ends: Vec<f64>,
    interior: Vec<f64>,
    mids: Vec<f64>,
}

impl NodeSums {
    fn new(ga: &[f64], gb: &[f64]) -> Self {
        let ends = ga.iter().zip(gb).map(|(a, b)| a + b).collect();
        Self {
            ends,
            interior: vec![0.0; ga.len()],
            mids: vec![0.0; ga.len()],
        }
    }

    /// Simpson average over `panels` panels: M + (T − M) / 3 with T the
    /// trapezoid average over panel boundaries and M the midpoint average.
    fn effective(&self, panels: usize, out: &mut [f64]) {
        let p = panels as f64;
        for (((o, e), i), m) in out.iter_mut().zip(&self.ends).zip(&self.interior).zip(&self.mids) {
            let trap = (0.5 * e + i) / p;
            let mid = m / p;
            *o = mid + (trap - mid) / 3.0;
        }
    }

    fn refine(&mut self) {
        add_into(&mut self.interior, &self.mids);
        self.mids.fill(0.0);
    }
}

/// Simpson-weighted gradient `(g(a) + 4 g((a+b)/2) + g(b)) / 6`.
pub fn simpson_gradient<L: Landscape + ?Sized>(land: &L, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() || a.len() != land.num_params() {
        return Err(Error::Contract("endpoint lengths differ from the landscape".into()));
    }
    let ga = land.evaluate(a, false)?.gradient;
    let gb = land.evaluate(b, false)?.gradient;
    let mut mid = vec![0.0; a.len()];
    interpolate(a, b, 0.5, &mut mid);
    let gm = land.evaluate(&mid, false)?.gradient;
    let mut sums = NodeSums::new(&ga, &gb);
    sums.mids = gm;
    let mut out = vec![0.0; a.len()];
    sums.effective(1, &mut out);
    Ok(out)
}

/// First-order allocation `g ⊙ dθ`.
pub fn lca_first_order(gradient: &[f64], step: &[f64]) -> Result<Vec<f64>> {
    if gradient.len() != step.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries, step has {}",
            gradient.len(),
            step.len()
        )));
    }
    Ok(gradient.iter().zip(step).map(|(g, d)| g * d).collect())
}

/// Integrate the segment a → b given endpoint evaluations.
fn integrate_segment<L: Landscape + ?Sized>(
    land: &L,
    t: usize,
    a: &[f64],
    b: &[f64],
    eval_a: &Evaluation,
    eval_b: &Evaluation,
    opts: &LcaOptions,
    per_class: bool,
) -> Result<StepOutcome> {
    let k = a.len();
    let step: Vec<f64> = b.iter().zip(a).map(|(y, x)| y - x).collect();
    let loss_change = eval_b.loss - eval_a.loss;
    let classes = if per_class { land.num_classes() } else { 0 };
    let class_grads = |e: &Evaluation| -> Result<Vec<Vec<f64>>> {
        e.class_gradients
            .clone()
            .ok_or_else(|| Error::Contract("evaluation lacks class gradients".into()))
    };

    let finish = |allocation: Vec<f64>, class_allocation, depth, flagged| {
        let allocated: f64 = allocation.iter().sum();
        StepOutcome {
            t,
            allocation,
            class_allocation,
            loss_change,
            residual: loss_change - allocated,
            depth,
            flagged,
        }
    };

    if step.iter().all(|d| *d == 0.0) {
        let zeros = per_class.then(|| vec![vec![0.0; k]; classes]);
        return Ok(finish(vec![0.0; k], zeros, 0, false));
    }

    if opts.method == Method::FirstOrder {
        let allocation = lca_first_order(&eval_a.gradient, &step)?;
        let class_allocation = if per_class {
            Some(
                class_grads(eval_a)?
                    .iter()
                    .map(|g| lca_first_order(g, &step))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        return Ok(finish(allocation, class_allocation, 0, false));
    }

    let mut total = NodeSums::new(&eval_a.gradient, &eval_b.gradient);
    let mut by_class: Vec<NodeSums> = if per_class {
        class_grads(eval_a)?
            .iter()
            .zip(class_grads(eval_b)?.iter())
            .map(|(ga, gb)| NodeSums::new(ga, gb))
            .collect()
    } else {
        Vec::new()
    };

    let mut point = vec![0.0; k];
    let mut effective = vec![0.0; k];
    let mut depth: u8 = 0;
    loop {
        // Evaluate the new panel midpoints at this depth.
        let panels = 1usize << depth;
        for j in 0..panels {
            let s = (2 * j + 1) as f64 / (2 * panels) as f64;
            interpolate(a, b, s, &mut point);
            let e = land.evaluate(&point, per_class)?;
            add_into(&mut total.mids, &e.gradient);
            if per_class {
                for (sums, g) in by_class.iter_mut().zip(class_grads(&e)?) {
                    add_into(&mut sums.mids, &g);
                }
            }
        }
        total.effective(panels, &mut effective);
        let allocated: f64 = effective.iter().zip(&step).map(|(g, d)| g * d).sum();
        let residual = loss_change - allocated;
        let converged = residual.abs() < opts.tol;
        if converged || depth >= opts.max_depth {
            let allocation = lca_first_order(&effective, &step)?;
            let class_allocation = if per_class {
                let mut out = Vec::with_capacity(classes);
                for sums in &by_class {
                    sums.effective(panels, &mut effective);
                    out.push(lca_first_order(&effective, &step)?);
                }
                Some(out)
            } else {
                None
            };
            return Ok(finish(allocation, class_allocation, depth, !converged));
        }
        depth += 1;
        total.refine();
        for sums in &mut by_class {
            sums.refine();
        }
    }
}

/// Allocate the change in loss of step `t` on its own (endpoints evaluated
/// here rather than shared with neighbouring steps).
pub fn adaptive_lca_step<S, L>(traj: &S, t: usize, land: &L, opts: &LcaOptions) -> Result<StepOutcome>
where
    S: SnapshotSource + ?Sized,
    L: Landscape + ?Sized,
{
    opts.validate()?;
    if t >= traj.num_iterations() {
        return Err(Error::Range {
            index: t,
            len: traj.num_iterations(),
        });
    }
    check_sizes(traj, land)?;
    let a = traj.snapshot_vec(t)?;
    let b = traj.snapshot_vec(t + 1)?;
    let ea = land.evaluate(&a, false)?;
    let eb = land.evaluate(&b, false)?;
    integrate_segment(land, t, &a, &b, &ea, &eb, opts, false).map_err(|e| e.at_iteration(t))
}

fn check_sizes<S, L>(traj: &S, land: &L) -> Result<()>
where
    S: SnapshotSource + ?Sized,
    L: Landscape + ?Sized,
{
    if traj.num_params() != land.num_params() {
        return Err(Error::Contract(format!(
            "trajectory has {} parameters, landscape {}",
            traj.num_params(),
            land.num_params()
        )));
    }
    if traj.num_iterations() == 0 {
        return Err(Error::Contract("trajectory has no steps".into()));
    }
    Ok(())
}

/// Walk the whole trajectory, streaming results into `sink`.
pub fn integrate<S, L>(
    traj: &S,
    land: &L,
    opts: &LcaOptions,
    per_class: bool,
    sink: &mut dyn LcaSink,
) -> Result<RunSummary>
where
    S: SnapshotSource + ?Sized,
    L: Landscape + ?Sized,
{
    opts.validate()?;
    check_sizes(traj, land)?;
    let steps = traj.num_iterations();
    let k = traj.num_params();
    let mut summary = RunSummary {
        steps,
        params: k,
        options: *opts,
        iter_error: Vec::with_capacity(steps),
        depth: Vec::with_capacity(steps),
        flagged: Vec::with_capacity(steps),
        losses: Vec::with_capacity(steps + 1),
        allocated_total: 0.0,
    };
    let mut a = traj.snapshot_vec(0)?;
    let mut b = vec![0.0; k];
    let mut ea = land.evaluate(&a, per_class).map_err(|e| e.at_iteration(0))?;
    sink.on_endpoint(0, &ea)?;
    summary.losses.push(ea.loss);
    for t in 0..steps {
        traj.snapshot_into(t + 1, &mut b)?;
        let eb = land.evaluate(&b, per_class).map_err(|e| e.at_iteration(t + 1))?;
        sink.on_endpoint(t + 1, &eb)?;
        summary.losses.push(eb.loss);
        let out = integrate_segment(land, t, &a, &b, &ea, &eb, opts, per_class)
            .map_err(|e| e.at_iteration(t))?;
        if out.flagged {
            log::warn!(
                "iteration {t}: residual {:+.3e} still above tol {} at depth cap {}",
                out.residual,
                opts.tol,
                opts.max_depth
            );
        }
        summary.allocated_total += out.allocation.iter().sum::<f64>();
        summary.iter_error.push(out.residual);
        summary.depth.push(out.depth);
        summary.flagged.push(out.flagged);
        sink.on_step(&out)?;
        std::mem::swap(&mut a, &mut b);
        ea = eb;
    }
    Ok(summary)
}

/// The full matrix without applying the cumulative gate.
pub fn compute_lca_unchecked<S, L>(traj: &S, land: &L, opts: &LcaOptions) -> Result<LcaMatrix>
where
    S: SnapshotSource + ?Sized,
    L: Landscape + ?Sized,
{
    let mut sink = MatrixSink::default();
    let summary = integrate(traj, land, opts, false, &mut sink)?;
    LcaMatrix::from_parts(summary, sink.values)
}

/// The full matrix; fails when the cumulative error reaches the gate.
pub fn compute_lca<S, L>(traj: &S, land: &L, opts: &LcaOptions) -> Result<LcaMatrix>
where
    S: SnapshotSource + ?Sized,
    L: Landscape + ?Sized,
{
    let m = compute_lca_unchecked(traj, land, opts)?;
    if m.summary.options.method == Method::Simpson {
        m.summary.check_gate()?;
    }
    Ok(m)
}

/// Total matrix and per-class tensor from one pass.  Refinement decisions are
/// taken on the total loss exactly as in [`compute_lca`], and the class
/// allocations are evaluated at the same points, so they add up to the total.
pub fn compute_lca_per_class<S>(
    traj: &S,
    land: &MlpLandscape<'_>,
    opts: &LcaOptions,
    aggregate: ClassAggregate,
) -> Result<(LcaMatrix, ClassLcaTensor)>
where
    S: SnapshotSource + ?Sized,
{
    let mut matrix = MatrixSink::default();
    let mut classes = ClassSink::new(land.layout(), land.num_classes(), aggregate);
    let summary = {
        let mut fan = FanOut(vec![&mut matrix, &mut classes]);
        integrate(traj, land, opts, true, &mut fan)?
    };
    let m = LcaMatrix::from_parts(summary, matrix.values)?;
    if m.summary.options.method == Method::Simpson {
        m.summary.check_gate()?;
    }
    Ok((m, classes.finish()))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::trajectory::MemoryTrajectory;

    fn random_psd(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let m: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut h = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let v: f64 = (0..dim).map(|k| m[i * dim + k] * m[j * dim + k]).sum::<f64>() / dim as f64;
                h[i * dim + j] = v;
                h[j * dim + i] = v;
            }
        }
        h
    }

    /// Smooth non-polynomial landscape: Σ_i log cosh(w_i θ_i) + coupling.
    struct LogCosh {
        w: Vec<f64>,
    }

    impl Landscape for LogCosh {
        fn num_params(&self) -> usize {
            self.w.len()
        }
        fn evaluate(&self, theta: &[f64], _per_class: bool) -> Result<Evaluation> {
            let s: f64 = theta.iter().sum();
            let loss = self
                .w
                .iter()
                .zip(theta)
                .map(|(w, t)| (w * t).cosh().ln())
                .sum::<f64>()
                + s.sin();
            let gradient = self
                .w
                .iter()
                .zip(theta)
                .map(|(w, t)| w * (w * t).tanh() + s.cos())
                .collect();
            Ok(Evaluation {
                loss,
                gradient,
                class_gradients: None,
            })
        }
    }

    #[test]
    fn first_order_toy_credits_the_moving_gradient_coordinate() {
        let a = lca_first_order(&[0.0, -1.0], &[0.3, 0.5]).unwrap();
        assert_eq!(a, vec![0.0, -0.5]);
        assert_eq!(lca_first_order(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(lca_first_order(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn plain_sgd_first_order_sign() {
        // A = g · (−lr ĝ): negative whenever g and ĝ agree in sign
        let g = [0.4, -0.2, 0.1];
        let mb = [0.5, -0.1, -0.3];
        let lr = 0.1;
        let step: Vec<f64> = mb.iter().map(|v| -lr * v).collect();
        let a = lca_first_order(&g, &step).unwrap();
        assert!(a[0] < 0.0 && a[1] < 0.0 && a[2] > 0.0);
    }

    #[test]
    fn simpson_gradient_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_psd(6, &mut rng);
        let q = QuadraticLandscape::new(h, vec![0.1; 6], 0.0).unwrap();
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(simpson_gradient(&q, &a, &a).unwrap(), q.gradient(&a));

        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let got = simpson_gradient(&q, &a, &b).unwrap();
        for (g, w) in got.iter().zip(q.gradient(&mid)) {
            assert!((g - w).abs() < 1e-14);
        }

        // constant gradient field: linear landscape (zero hessian)
        let flat = QuadraticLandscape::new(vec![0.0; 36], vec![0.0; 6], 1.0).unwrap();
        assert!(simpson_gradient(&flat, &a, &b).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_converges_at_depth_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dim = 12;
        let q = QuadraticLandscape::new(random_psd(dim, &mut rng), vec![0.3; dim], 0.5).unwrap();
        let mut snaps = vec![(0..dim).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>()];
        for _ in 0..10 {
            let last = snaps.last().unwrap().clone();
            let g = q.gradient(&last);
            snaps.push(last.iter().zip(&g).map(|(x, g)| x - 0.3 * g).collect());
        }
        let traj = MemoryTrajectory::new(snaps).unwrap();
        for t in 0..10 {
            let out = adaptive_lca_step(&traj, t, &q, &LcaOptions::default()).unwrap();
            assert_eq!(out.depth, 0);
            assert!(out.residual.abs() < 1e-12, "{}", out.residual);
        }
        assert!(adaptive_lca_step(&traj, 10, &q, &LcaOptions::default()).is_err());
    }

    #[test]
    fn identical_endpoints_allocate_nothing() {
        let q = QuadraticLandscape::new(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 0.0).unwrap();
        let traj = MemoryTrajectory::new(vec![vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let out = adaptive_lca_step(&traj, 0, &q, &LcaOptions::default()).unwrap();
        assert!(out.allocation.iter().all(|v| *v == 0.0));
        assert_eq!(out.residual, 0.0);
    }

    #[test]
    fn refinement_reaches_tolerance_on_curved_landscape() {
        let land = LogCosh {
            w: vec![3.0, -5.0, 8.0],
        };
        let traj = MemoryTrajectory::new(vec![vec![-1.0, 0.5, 1.0], vec![1.2, -0.7, -0.9]]).unwrap();
        let opts = LcaOptions {
            tol: 1e-9,
            max_depth: 10,
            ..Default::default()
        };
        let out = adaptive_lca_step(&traj, 0, &land, &opts).unwrap();
        assert!(out.depth > 0);
        assert!(!out.flagged);
        assert!(out.residual.abs() < 1e-9);

        let capped = LcaOptions {
            tol: 1e-14,
            max_depth: 1,
            ..Default::default()
        };
        let out = adaptive_lca_step(&traj, 0, &land, &capped).unwrap();
        assert_eq!(out.depth, 1);
        assert!(out.flagged);
    }

    #[test]
    fn panel_doubling_is_fourth_order() {
        let land = LogCosh {
            w: vec![0.7, -1.1, 0.4, 0.9],
        };
        let a = vec![-0.4, 0.2, 0.3, -0.1];
        let b = vec![0.5, -0.3, -0.2, 0.6];
        let traj = MemoryTrajectory::new(vec![a, b]).unwrap();
        let mut prev = f64::INFINITY;
        for depth in 0..4u8 {
            // forcing a fixed depth: tolerance too tight to stop early
            let opts = LcaOptions {
                tol: 1e-300,
                max_depth: depth,
                ..Default::default()
            };
            let e = adaptive_lca_step(&traj, 0, &land, &opts).unwrap().residual.abs();
            if e < 1e-13 {
                break;
            }
            assert!(prev / e >= 8.0, "depth {depth}: {prev} -> {e}");
            prev = e;
        }
    }

    #[test]
    fn conservation_holds_per_step() {
        let land = LogCosh {
            w: vec![2.0, -1.0, 0.5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let snaps: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let traj = MemoryTrajectory::new(snaps).unwrap();
        let m = compute_lca_unchecked(&traj, &land, &LcaOptions::default()).unwrap();
        for t in 0..m.steps() {
            let s: f64 = m.row(t).iter().sum();
            let dl = m.summary.losses[t + 1] - m.summary.losses[t];
            assert_eq!(s + m.iter_error()[t], dl);
        }
    }

    #[test]
    fn first_order_mode_skips_refinement() {
        let land = LogCosh { w: vec![4.0, 4.0] };
        let traj = MemoryTrajectory::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0], vec![0.3, 0.2]]).unwrap();
        let m = compute_lca(&traj, &land, &LcaOptions::first_order()).unwrap();
        assert!(m.depth().iter().all(|d| *d == 0));
        let g0 = land.evaluate(&[-1.0, 1.0], false).unwrap().gradient;
        assert_eq!(m.row(0), &lca_first_order(&g0, &[2.0, -2.0]).unwrap()[..]);
    }

    #[test]
    fn gate_failure_lists_worst_iterations() {
        let land = LogCosh { w: vec![6.0] };
        let traj = MemoryTrajectory::new(vec![vec![-2.0], vec![2.0], vec![-1.9]]).unwrap();
        let opts = LcaOptions {
            tol: 1e-12,
            max_depth: 0,
            ..Default::default()
        };
        match compute_lca(&traj, &land, &opts) {
            Err(Error::LcaGate { worst, .. }) => assert!(!worst.is_empty()),
            other => panic!("expected gate failure, got {other:?}"),
        }
    }
}
