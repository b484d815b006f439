//! Multi-arm, multi-seed studies.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::report::{cell, csv_err, csv_writer, finish_csv, read_json, write_json, Provenance};
use super::run::{lca_unchecked, train, RunPaths};
use crate::analysis::{help_fraction_histogram, HelpSink, LayerTotals};
use crate::engine::{LayerTotalsSink, LcaSink, Method};
use crate::error::{Error, Result};
use crate::nn::Dataset;
use crate::optim::{momentum_from_delay, LayerOverride};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Baseline,
    FreezeFirst,
    FreezeLast,
    FreezeAtArgmin,
    Lr10xLast,
    DelaySweep,
    HyperparamSweep,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Baseline,
        Preset::FreezeFirst,
        Preset::FreezeLast,
        Preset::FreezeAtArgmin,
        Preset::Lr10xLast,
        Preset::DelaySweep,
        Preset::HyperparamSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::FreezeFirst => "freeze-first",
            Preset::FreezeLast => "freeze-last",
            Preset::FreezeAtArgmin => "freeze-at-argmin",
            Preset::Lr10xLast => "lr10x-last",
            Preset::DelaySweep => "delay-sweep",
            Preset::HyperparamSweep => "hyperparam-sweep",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown preset '{s}' (one of {})", names.join(", ")))
            })
    }
}

/// One arm of a study: a configuration applied to every seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub config: RunConfig,
    /// Delay value for sweep arms.
    pub delay: Option<usize>,
}

fn arm(name: &str, config: RunConfig) -> Arm {
    Arm {
        name: name.into(),
        config,
        delay: None,
    }
}

fn with_override(base: &RunConfig, layer: usize, f: impl FnOnce(&mut LayerOverride)) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let name = cfg.layout()?.layer_name(layer);
    let o = cfg.optimizer.per_layer.entry(name).or_default();
    f(o);
    Ok(cfg)
}

/// Arms known before any run has happened.  For `freeze-at-argmin` only the
/// baseline arm; the frozen arm depends on each baseline run.
pub fn preset_arms(preset: Preset, base: &RunConfig) -> Result<Vec<Arm>> {
    let layers = base.layout()?.num_layers();
    let last = layers - 1;
    let baseline = arm("baseline", base.clone());
    Ok(match preset {
        Preset::Baseline | Preset::FreezeAtArgmin => vec![baseline],
        Preset::FreezeFirst => vec![
            baseline,
            arm("freeze-first", with_override(base, 0, |o| o.frozen = true)?),
        ],
        Preset::FreezeLast => vec![
            baseline,
            arm("freeze-last", with_override(base, last, |o| o.frozen = true)?),
        ],
        Preset::Lr10xLast => vec![
            baseline,
            arm("lr10x-last", with_override(base, last, |o| o.lr_scale *= 0.1)?),
        ],
        Preset::DelaySweep => (0..10)
            .map(|d| {
                let m = momentum_from_delay(d as f64)?;
                Ok(Arm {
                    name: format!("delay-{d}"),
                    config: with_override(base, last, |o| o.momentum_override = Some(m))?,
                    delay: Some(d),
                })
            })
            .collect::<Result<_>>()?,
        Preset::HyperparamSweep => {
            let o = &base.optimizer;
            let mut arms = vec![baseline];
            for f in [0.5, 2.0] {
                let mut c = base.clone();
                c.optimizer.lr = o.lr * f;
                arms.push(arm(&format!("lr-{}", c.optimizer.lr), c));
            }
            for m in [0.0, 0.5] {
                if m != o.momentum {
                    let mut c = base.clone();
                    c.optimizer.momentum = m;
                    arms.push(arm(&format!("momentum-{m}"), c));
                }
            }
            for b in [o.batch_size / 2, o.batch_size * 2] {
                if b > 0 {
                    let mut c = base.clone();
                    c.optimizer.batch_size = b;
                    arms.push(arm(&format!("batch-{b}"), c));
                }
            }
            arms
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunState {
    Ok,
    GateFailed { cumulative_error_pct: f64 },
    NumericFailed { message: String },
}

/// Outcome of one (arm, seed) job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub run_id: String,
    pub config_hash: String,
    /// Dataset the run was trained on; cached results are only reused for
    /// the same one.
    #[serde(default)]
    pub dataset_id: String,
    pub state: RunState,
    pub layer_totals: Option<LayerTotals>,
    /// Per layer, the iteration after which the cumulative layer LCA is
    /// lowest.
    pub cumulative_argmin: Vec<usize>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub cumulative_error_pct: Option<f64>,
    pub pct_helped: Option<f64>,
    pub pct_zero: Option<f64>,
    pub help_mode: Option<(f64, f64)>,
    pub flagged: usize,
}

impl RunResult {
    pub fn passed(&self) -> bool {
        self.state == RunState::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub delay: Option<usize>,
    pub runs: usize,
    pub passing: usize,
    pub layer_mean: Vec<f64>,
    pub layer_std: Vec<f64>,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub pct_helped_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub preset: Preset,
    pub layer_names: Vec<String>,
    pub runs: Vec<RunResult>,
    pub arms: Vec<ArmSummary>,
    /// Delay sweep: least-squares line of mean last-layer LCA against delay.
    pub delay_fit: Option<LinearFit>,
}

impl ExperimentReport {
    pub fn arm_runs<'a>(&'a self, arm: &'a str) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.arm == arm)
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Keep trajectory and LCAM files of every run.
    pub keep_artifacts: bool,
    /// Reuse results of earlier runs with the same configuration hash.
    pub cache_dir: Option<PathBuf>,
    /// Run jobs in parallel.
    pub parallel: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, _) = mean_std(x);
    let (my, _) = mean_std(y);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

fn cache_file(dir: &Path, cfg: &RunConfig) -> PathBuf {
    dir.join(format!("{}.json", cfg.config_hash()))
}

/// Train and integrate one configuration, keeping only summary numbers.
pub fn run_job(arm: &str, cfg: &RunConfig, data: &Dataset, opts: &ExperimentOptions) -> Result<RunResult> {
    if let Some(dir) = &opts.cache_dir {
        let p = cache_file(dir, cfg);
        if p.exists() {
            if let Ok(mut r) = read_json::<RunResult>(&p) {
                if r.config_hash == cfg.config_hash() && r.dataset_id == data.id() {
                    log::info!("{}: reusing {}", cfg.run_id, p.display());
                    r.arm = arm.into();
                    r.run_id = cfg.run_id.clone();
                    return Ok(r);
                }
            }
        }
    }
    let paths = RunPaths::new(opts.out_dir.join(arm).join(&cfg.run_id), &cfg.run_id, cfg.lca.method);
    let layout = cfg.layout()?;
    let mut result = RunResult {
        arm: arm.into(),
        seed: cfg.seed,
        run_id: cfg.run_id.clone(),
        config_hash: cfg.config_hash(),
        dataset_id: data.id().to_string(),
        state: RunState::Ok,
        layer_totals: None,
        cumulative_argmin: Vec::new(),
        initial_loss: None,
        final_loss: None,
        cumulative_error_pct: None,
        pct_helped: None,
        pct_zero: None,
        help_mode: None,
        flagged: 0,
    };
    match train(cfg, data, &paths) {
        Ok(t) => {
            result.initial_loss = Some(t.initial_loss);
            result.final_loss = Some(t.final_loss);
        }
        Err(Error::Numeric { message, iteration }) => {
            result.state = RunState::NumericFailed {
                message: format!("iteration {iteration:?}: {message}"),
            };
            return finish_job(result, &paths, cfg, opts);
        }
        Err(e) => return Err(e),
    }
    let mut totals = LayerTotalsSink::as_stored(&layout);
    let mut help = HelpSink::new(&layout, cfg.analysis.zero_tol);
    let lca = {
        let mut extra: [&mut dyn LcaSink; 2] = [&mut totals, &mut help];
        lca_unchecked(cfg, data, &paths.trajectory, &paths, &mut extra)
    };
    let report = match lca {
        Ok(r) => r,
        Err(Error::Numeric { message, iteration }) => {
            result.state = RunState::NumericFailed {
                message: format!("integration, iteration {iteration:?}: {message}"),
            };
            return finish_job(result, &paths, cfg, opts);
        }
        Err(e) => return Err(e),
    };
    let stats = help.finish();
    result.cumulative_error_pct = Some(report.cumulative_error_pct);
    result.final_loss = report.summary.losses.last().copied();
    result.flagged = report.flagged.len();
    if cfg.lca.method == Method::Simpson && !report.gate_passed {
        result.state = RunState::GateFailed {
            cumulative_error_pct: report.cumulative_error_pct,
        };
    }
    result.cumulative_argmin = (0..layout.num_layers())
        .map(|l| {
            let mut acc = 0.0;
            let mut best = (0, 0.0);
            for (t, row) in totals.per_iteration.iter().enumerate() {
                acc += row[l];
                if acc < best.1 {
                    best = (t + 1, acc);
                }
            }
            best.0
        })
        .collect();
    result.layer_totals = Some(LayerTotals::from_totals(&layout, totals.totals));
    result.pct_helped = Some(stats.overall_pct_helped);
    result.pct_zero = Some(stats.overall_pct_zero);
    result.help_mode = help_fraction_histogram(&stats, cfg.analysis.histogram_bins).mode_interval();
    finish_job(result, &paths, cfg, opts)
}

fn finish_job(result: RunResult, paths: &RunPaths, cfg: &RunConfig, opts: &ExperimentOptions) -> Result<RunResult> {
    if !opts.keep_artifacts {
        for p in [&paths.trajectory, &paths.lcam] {
            let _ = std::fs::remove_file(p);
        }
        let _ = std::fs::remove_file(crate::engine::sidecar_path(&paths.lcam));
    }
    std::fs::create_dir_all(&paths.dir)?;
    write_json(&paths.dir.join("result.json"), &result)?;
    if let Some(dir) = &opts.cache_dir {
        std::fs::create_dir_all(dir)?;
        write_json(&cache_file(dir, cfg), &result)?;
    }
    Ok(result)
}

fn run_all(jobs: &[(Arm, RunConfig)], data: &Dataset, opts: &ExperimentOptions) -> Result<Vec<RunResult>> {
    let go = |(a, c): &(Arm, RunConfig)| run_job(&a.name, c, data, opts);
    if opts.parallel {
        jobs.par_iter().map(go).collect()
    } else {
        jobs.iter().map(go).collect()
    }
}

fn seeded(base_id: &str, arm: &Arm, seed: u64) -> RunConfig {
    let mut c = arm.config.clone();
    c.seed = seed;
    c.run_id = format!("{base_id}-{}-s{seed}", arm.name);
    c
}

/// Run every arm of `preset` for each seed and aggregate.
pub fn run_experiment(
    preset: Preset,
    base: &RunConfig,
    data: &Dataset,
    opts: &ExperimentOptions,
) -> Result<ExperimentReport> {
    base.validate()?;
    if opts.seeds.is_empty() {
        return Err(Error::Config("an experiment needs at least one seed".into()));
    }
    let layout = base.layout()?;
    let mut arms = preset_arms(preset, base)?;
    let mut jobs: Vec<(Arm, RunConfig)> = arms
        .iter()
        .flat_map(|a| opts.seeds.iter().map(move |&s| (a.clone(), seeded(&base.run_id, a, s))))
        .collect();
    let mut runs = run_all(&jobs, data, opts)?;

    if preset == Preset::FreezeAtArgmin {
        let frozen = Arm {
            name: "freeze-at-argmin".into(),
            config: base.clone(),
            delay: None,
        };
        jobs.clear();
        for r in &runs {
            let Some(&at) = r.cumulative_argmin.first() else {
                log::warn!("{}: no baseline totals, skipping its frozen arm", r.run_id);
                continue;
            };
            let mut a = frozen.clone();
            a.config = with_override(base, 0, |o| o.frozen_from = Some(at))?;
            let c = seeded(&base.run_id, &a, r.seed);
            jobs.push((a, c));
        }
        runs.extend(run_all(&jobs, data, opts)?);
        arms.push(frozen);
    }

    let summaries: Vec<ArmSummary> = arms
        .iter()
        .map(|a| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.arm == a.name).collect();
            let ok: Vec<&RunResult> = mine.iter().copied().filter(|r| r.passed()).collect();
            let per_layer: Vec<(f64, f64)> = (0..layout.num_layers())
                .map(|l| {
                    let v: Vec<f64> = ok
                        .iter()
                        .filter_map(|r| r.layer_totals.as_ref().map(|t| t.totals[l]))
                        .collect();
                    mean_std(&v)
                })
                .collect();
            let losses: Vec<f64> = ok.iter().filter_map(|r| r.final_loss).collect();
            let helped: Vec<f64> = ok.iter().filter_map(|r| r.pct_helped).collect();
            let (lm, ls) = mean_std(&losses);
            ArmSummary {
                arm: a.name.clone(),
                delay: a.delay,
                runs: mine.len(),
                passing: ok.len(),
                layer_mean: per_layer.iter().map(|p| p.0).collect(),
                layer_std: per_layer.iter().map(|p| p.1).collect(),
                final_loss_mean: lm,
                final_loss_std: ls,
                pct_helped_mean: mean_std(&helped).0,
            }
        })
        .collect();
    let delay_fit = if preset == Preset::DelaySweep {
        let last = layout.num_layers() - 1;
        let pts: Vec<(f64, f64)> = summaries
            .iter()
            .filter(|s| s.passing > 0)
            .filter_map(|s| s.delay.map(|d| (d as f64, s.layer_mean[last])))
            .collect();
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        linear_fit(&x, &y)
    } else {
        None
    };
    for r in &runs {
        if !r.passed() {
            log::warn!("{} ({}): {:?}", r.run_id, r.arm, r.state);
        }
    }
    let report = ExperimentReport {
        preset,
        layer_names: (0..layout.num_layers()).map(|l| layout.layer_name(l)).collect(),
        runs,
        arms: summaries,
        delay_fit,
    };
    write_experiment(&report, base, &opts.out_dir)?;
    Ok(report)
}

/// `comparison.csv`, `runs.csv` and `experiment.json`.
pub fn write_experiment(report: &ExperimentReport, base: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut prov = Provenance::of(base);
    prov.run_id = format!("{}:{}", base.run_id, report.preset);
    let mut w = csv_writer(&dir.join("comparison.csv"), &prov)?;
    let mut header = vec!["arm".to_string(), "runs".into(), "passing".into()];
    for n in &report.layer_names {
        header.push(format!("{n}_mean"));
        header.push(format!("{n}_std"));
    }
    header.extend(["final_loss_mean".into(), "final_loss_std".into(), "pct_helped_mean".into()]);
    w.write_record(&header).map_err(csv_err)?;
    for a in &report.arms {
        let mut rec = vec![a.arm.clone(), a.runs.to_string(), a.passing.to_string()];
        for (m, s) in a.layer_mean.iter().zip(&a.layer_std) {
            rec.push(cell(Some(*m)));
            rec.push(cell(Some(*s)));
        }
        rec.push(cell(Some(a.final_loss_mean)));
        rec.push(cell(Some(a.final_loss_std)));
        rec.push(cell(Some(a.pct_helped_mean)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish_csv(w)?;

    let mut w = csv_writer(&dir.join("runs.csv"), &prov)?;
    let mut header = vec![
        "arm".to_string(),
        "seed".into(),
        "run_id".into(),
        "config_hash".into(),
        "state".into(),
    ];
    header.extend(report.layer_names.iter().cloned());
    header.extend([
        "final_loss".into(),
        "cumulative_error_pct".into(),
        "pct_helped".into(),
        "pct_zero".into(),
    ]);
    w.write_record(&header).map_err(csv_err)?;
    for r in &report.runs {
        let state = match &r.state {
            RunState::Ok => "ok".to_string(),
            RunState::GateFailed { .. } => "gate-failed".into(),
            RunState::NumericFailed { .. } => "numeric-failed".into(),
        };
        let mut rec = vec![
            r.arm.clone(),
            r.seed.to_string(),
            r.run_id.clone(),
            r.config_hash.clone(),
            state,
        ];
        for l in 0..report.layer_names.len() {
            rec.push(cell(r.layer_totals.as_ref().map(|t| t.totals[l])));
        }
        rec.extend([
            cell(r.final_loss),
            cell(r.cumulative_error_pct),
            cell(r.pct_helped),
            cell(r.pct_zero),
        ]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish_csv(w)?;
    write_json(&dir.join("experiment.json"), report)
}
