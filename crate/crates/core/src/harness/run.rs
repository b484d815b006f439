//! Single-run pipeline: train, then integrate.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::report::{csv_err, csv_writer, finish_csv, write_json, Provenance};
use crate::analysis::GradientSignSink;
use crate::engine::{
    integrate, ClassSink, FanOut, LcaSink, LcamSidecar, LcamWriter, Method, MlpLandscape, RunSummary,
};
use crate::error::{Error, Result};
use crate::nn::{forward_loss, init_params, loss_and_gradient, Dataset};
use crate::optim::{EpochSampler, Optimizer};
use crate::trajectory::{
    Precision, RunStatus, SnapshotSource, Trajectory, TrajectoryMeta, TrajectoryWriter,
};

/// File names used for one run inside its directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub trajectory: PathBuf,
    pub train_log: PathBuf,
    pub lcam: PathBuf,
    pub iterations: PathBuf,
    pub classes: PathBuf,
    pub report_dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>, run_id: &str, method: Method) -> Self {
        let dir = dir.into();
        let tag = match method {
            Method::Simpson => "",
            Method::FirstOrder => ".first-order",
        };
        Self {
            config: dir.join("config.toml"),
            trajectory: dir.join(format!("{run_id}.lcat")),
            train_log: dir.join(format!("{run_id}.train.csv")),
            lcam: dir.join(format!("{run_id}{tag}.lcam")),
            iterations: dir.join(format!("{run_id}{tag}.iterations.csv")),
            classes: dir.join(format!("{run_id}{tag}.classes.json")),
            report_dir: dir.join(format!("report{tag}")),
            dir,
        }
    }

    /// `<output_dir>/<run_id>/`.
    pub fn for_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.output_dir.join(&cfg.run_id), &cfg.run_id, cfg.lca.method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trajectory: PathBuf,
    pub log: PathBuf,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub status: RunStatus,
}

fn sampler_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x5eed)
}

/// Run the optimizer for `cfg.iterations` steps and record every iterate.
///
/// Parameters are rounded to the storage precision after each step, so the
/// stored path is exactly the path that was trained.  A numeric failure
/// finalizes the file with a failure marker and returns the error.
pub fn train(cfg: &RunConfig, data: &Dataset, paths: &RunPaths) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&paths.dir)?;
    std::fs::write(&paths.config, cfg.to_toml()?)?;
    let layout = Arc::new(cfg.layout()?);
    let mut theta = init_params(&cfg.arch, cfg.seed)?;
    let quantize = cfg.precision == Precision::F32;
    if quantize {
        theta.quantize_f32();
    }
    let opt = Optimizer::new(cfg.optimizer.clone(), layout.clone())?;
    let mut state = opt.init_state();
    let mut sampler = EpochSampler::new(data.len(), sampler_seed(cfg.seed))?;
    let mut writer = TrajectoryWriter::create(&paths.trajectory, &layout, cfg.precision)?;
    writer.append(&theta)?;

    let prov = Provenance::of(cfg);
    let mut log = csv_writer(&paths.train_log, &prov)?;
    log.write_record(["iteration", "epoch", "minibatch_loss", "train_loss"])
        .map_err(csv_err)?;
    let initial_loss = forward_loss(&theta, data, None)?;
    log.write_record(["0", "0", "", &initial_loss.to_string()]).map_err(csv_err)?;
    let mut minibatch_loss = Vec::with_capacity(cfg.iterations);
    let mut batches = Vec::with_capacity(cfg.iterations);
    let mut last_loss = initial_loss;
    let mut status = RunStatus::Complete;
    let mut failure = None;

    for t in 0..cfg.iterations {
        let batch = sampler.next_batch(cfg.optimizer.batch_size)?;
        let stepped = loss_and_gradient(&theta, data, Some(&batch))
            .and_then(|(loss, g)| opt.step(&mut theta, &mut state, &g).map(|_| loss));
        let loss = match stepped {
            Ok(l) => l,
            Err(e @ Error::Numeric { .. }) => {
                let e = e.at_iteration(t);
                log::error!("{}: {e}", cfg.run_id);
                status = RunStatus::Failed {
                    iteration: t,
                    reason: e.to_string(),
                };
                failure = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        if quantize {
            theta.quantize_f32();
        }
        writer.append(&theta)?;
        minibatch_loss.push(loss);
        batches.push(batch.iter().map(|&i| i as u32).collect::<Vec<u32>>());
        let done = t + 1;
        let full = if done == cfg.iterations || (cfg.log_every > 0 && done % cfg.log_every == 0) {
            let l = forward_loss(&theta, data, None)?;
            last_loss = l;
            log::info!(
                "{} step {done}/{}: minibatch {loss:.4}, train {l:.4}",
                cfg.run_id,
                cfg.iterations
            );
            l.to_string()
        } else {
            String::new()
        };
        log.write_record([
            done.to_string(),
            sampler.epoch().to_string(),
            loss.to_string(),
            full,
        ])
        .map_err(csv_err)?;
    }
    finish_csv(log)?;

    let steps = minibatch_loss.len();
    let meta = TrajectoryMeta {
        run_id: cfg.run_id.clone(),
        seed: cfg.seed,
        arch: cfg.arch.clone(),
        optimizer: cfg.optimizer.clone(),
        dataset_id: data.id().to_string(),
        config_hash: cfg.config_hash(),
        sampling: format!(
            "epoch shuffle without replacement, batch {}, seed {}",
            cfg.optimizer.batch_size,
            sampler_seed(cfg.seed)
        ),
        minibatch_loss,
        train_loss: None,
        batches,
        status: status.clone(),
    };
    if steps == 0 {
        // nothing to integrate; keep the failure visible without a file
        drop(writer);
        let _ = std::fs::remove_file(&paths.trajectory);
    } else {
        writer.finish(&meta)?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(TrainReport {
        trajectory: paths.trajectory.clone(),
        log: paths.train_log.clone(),
        steps,
        initial_loss,
        final_loss: last_loss,
        status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcaReport {
    pub lcam: PathBuf,
    pub classes: Option<PathBuf>,
    pub iterations: PathBuf,
    pub summary: RunSummary,
    pub cumulative_error_pct: f64,
    pub flagged: Vec<usize>,
    pub depth_histogram: Vec<usize>,
    pub gate_passed: bool,
}

impl LcaReport {
    pub fn describe(&self) -> String {
        let s = &self.summary;
        let mut out = format!(
            "T={} K={} loss {:.6} -> {:.6} (dL {:+.6}), allocated {:+.6}\ncumulative error {:+.4}% (gate {}%): {}\n",
            s.steps,
            s.params,
            s.losses[0],
            s.losses[s.steps],
            s.loss_change(),
            s.allocated_total,
            self.cumulative_error_pct,
            s.options.gate_pct,
            match (s.options.method, self.gate_passed) {
                (Method::FirstOrder, _) => "not gated",
                (_, true) => "pass",
                (_, false) => "FAIL",
            },
        );
        out += &format!("mean |eps_t| {:.3e}\n", s.mean_abs_iter_error());
        out += "depth histogram:";
        for (d, n) in self.depth_histogram.iter().enumerate() {
            if *n > 0 {
                out += &format!(" {d}:{n}");
            }
        }
        out += &format!("\nflagged iterations: {}", self.flagged.len());
        if !self.flagged.is_empty() {
            let shown: Vec<String> = self.flagged.iter().take(20).map(|t| t.to_string()).collect();
            out += &format!(" [{}{}]", shown.join(", "), if self.flagged.len() > 20 { ", ..." } else { "" });
        }
        out
    }
}

/// Integrate a finalized trajectory, writing the LCAM file, its sidecar,
/// the per-iteration error table and (with `per_class`) the class tensor.
///
/// `extra` sinks see every endpoint and step as well.  Artifacts are written
/// before the cumulative gate is applied; a gate failure is returned as
/// [`Error::LcaGate`].
pub fn lca(
    cfg: &RunConfig,
    data: &Dataset,
    trajectory: &Path,
    paths: &RunPaths,
    extra: &mut [&mut dyn LcaSink],
) -> Result<LcaReport> {
    let report = lca_unchecked(cfg, data, trajectory, paths, extra)?;
    if cfg.lca.method == Method::Simpson {
        report.summary.check_gate()?;
    }
    Ok(report)
}

/// [`lca`] without the final gate.
pub fn lca_unchecked(
    cfg: &RunConfig,
    data: &Dataset,
    trajectory: &Path,
    paths: &RunPaths,
    extra: &mut [&mut dyn LcaSink],
) -> Result<LcaReport> {
    let traj = Trajectory::open(trajectory)?;
    if let RunStatus::Failed { iteration, reason } = &traj.meta().status {
        return Err(Error::Contract(format!(
            "{} is a failed run (iteration {iteration}: {reason})",
            trajectory.display()
        )));
    }
    let layout = traj.layout().clone();
    if layout.widths() != cfg.arch.as_slice() {
        return Err(Error::Contract(format!(
            "trajectory arch {:?} differs from config arch {:?}",
            layout.widths(),
            cfg.arch
        )));
    }
    if traj.meta().dataset_id != data.id() {
        log::warn!(
            "trajectory was trained on '{}', integrating on '{}'",
            traj.meta().dataset_id,
            data.id()
        );
    }
    std::fs::create_dir_all(&paths.dir)?;
    let opts = cfg.lca.options();
    let land = MlpLandscape::new(data, layout.clone())?;
    let steps = traj.num_iterations();
    let mut writer = LcamWriter::create(&paths.lcam, steps, layout.len(), opts.tol)?;
    let mut signs = GradientSignSink::new(layout.len());
    let mut classes = cfg
        .lca
        .per_class
        .then(|| ClassSink::new(&layout, data.num_classes(), cfg.lca.class_aggregate));
    let summary = {
        let mut sinks: Vec<&mut dyn LcaSink> = vec![&mut writer, &mut signs];
        if let Some(c) = classes.as_mut() {
            sinks.push(c);
        }
        for e in extra.iter_mut() {
            sinks.push(&mut **e);
        }
        let mut fan = FanOut(sinks);
        integrate(&traj, &land, &opts, cfg.lca.per_class, &mut fan)?
    };
    let sidecar = LcamSidecar {
        run_id: cfg.run_id.clone(),
        config_hash: cfg.config_hash(),
        layout: (*layout).clone(),
        summary: summary.clone(),
        gradient_sign: Some(signs.summary(&layout)),
    };
    writer.finish(&sidecar)?;

    let prov = Provenance::of(cfg);
    let mut w = csv_writer(&paths.iterations, &prov)?;
    w.write_record([
        "iteration",
        "loss_before",
        "loss_after",
        "loss_change",
        "allocated",
        "residual",
        "depth",
        "flagged",
    ])
    .map_err(csv_err)?;
    for t in 0..summary.steps {
        let dl = summary.losses[t + 1] - summary.losses[t];
        w.write_record([
            t.to_string(),
            summary.losses[t].to_string(),
            summary.losses[t + 1].to_string(),
            dl.to_string(),
            (dl - summary.iter_error[t]).to_string(),
            summary.iter_error[t].to_string(),
            summary.depth[t].to_string(),
            summary.flagged[t].to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)?;

    let class_path = match classes {
        Some(c) => {
            write_json(&paths.classes, &c.finish())?;
            Some(paths.classes.clone())
        }
        None => None,
    };
    let report = LcaReport {
        lcam: paths.lcam.clone(),
        classes: class_path,
        iterations: paths.iterations.clone(),
        cumulative_error_pct: summary.cumulative_error_pct(),
        flagged: (0..summary.steps).filter(|&t| summary.flagged[t]).collect(),
        depth_histogram: summary.depth_histogram(),
        gate_passed: summary.check_gate().is_ok(),
        summary,
    };
    log::info!("{}: {}", cfg.run_id, report.describe());
    Ok(report)
}
