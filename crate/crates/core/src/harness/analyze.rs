//! Report generation from finished LCAM (and optionally trajectory) files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::AnalysisConfig;
use super::report::{cell, csv_err, csv_writer, finish_csv, read_json, write_json, Provenance};
use crate::analysis::{
    alignment_test, detect_peaks, equal_windows, fanio_correlation, help_fraction_histogram,
    helping_stats, layer_series, layer_significance, layer_totals, neuron_specialization,
    oscillation_counts, tail_stats, AlignmentOptions, FanioLayer, Histogram, LayerSignificance,
    LayerSpecialization, LayerTotals, OscillationReport, TailOptions, TailWindow,
};
use crate::engine::{load_matrix, ClassAggregate, ClassLcaTensor, LcaMatrix, LcamSidecar};
use crate::error::{Error, Result};
use crate::nn::LayerLayout;
use crate::trajectory::{SnapshotSource, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelpSummary {
    pub overall_pct_helped: f64,
    pub overall_pct_zero: f64,
    pub per_layer_pct_helped: Vec<f64>,
    pub histogram: Histogram,
    pub histogram_mode: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSummary {
    /// All iterations pooled.
    pub overall: TailWindow,
    pub windows: Vec<TailWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSummary {
    pub peaks_k: usize,
    pub classes: usize,
    pub layers: usize,
    pub aligned: Vec<Vec<usize>>,
    pub observed: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub p_value: f64,
    pub trials: usize,
}

/// Everything `analyze` computed for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub provenance: Provenance,
    pub steps: usize,
    pub params: usize,
    pub loss_change: f64,
    pub cumulative_error_pct: f64,
    pub help: Option<HelpSummary>,
    pub layers: Option<LayerTotals>,
    pub oscillation: Option<OscillationReport>,
    pub tails: Option<TailSummary>,
    pub sync: Option<SyncSummary>,
    pub specialization: Option<Vec<LayerSpecialization>>,
    pub fanio: Option<Vec<FanioLayer>>,
    /// Analyses that were requested but could not run, with the reason.
    pub skipped: Vec<String>,
}

/// Inputs of one analysis pass.
#[derive(Debug, Clone, Default)]
pub struct AnalyzeInputs {
    pub lcam: PathBuf,
    pub trajectory: Option<PathBuf>,
    pub classes: Option<PathBuf>,
}

fn check_tensor(t: &ClassLcaTensor, lca: &LcaMatrix, layout: &LayerLayout) -> Result<()> {
    let width = match t.aggregate {
        ClassAggregate::None => layout.len(),
        ClassAggregate::Layer => layout.num_layers(),
    };
    if t.steps != lca.steps() || t.width != width || t.classes != layout.num_classes() {
        return Err(Error::Contract(format!(
            "class tensor is {}x{}x{}, run needs {}x{}x{}",
            t.classes,
            t.steps,
            t.width,
            layout.num_classes(),
            lca.steps(),
            width
        )));
    }
    Ok(())
}

/// Per class, the instantaneous layer LCA series.
fn class_layer_series(t: &ClassLcaTensor, layout: &LayerLayout) -> Vec<Vec<Vec<f64>>> {
    (0..t.classes)
        .map(|c| match t.aggregate {
            ClassAggregate::Layer => (0..t.width).map(|l| t.series(c, l)).collect(),
            ClassAggregate::None => layout
                .layer_ranges()
                .iter()
                .map(|r| {
                    (0..t.steps)
                        .map(|s| r.clone().map(|i| t.get(c, s, i)).sum())
                        .collect()
                })
                .collect(),
        })
        .collect()
}

/// Run the enabled analyses and write CSV tables plus `summary.json` into
/// `out_dir`.
pub fn analyze(inputs: &AnalyzeInputs, acfg: &AnalysisConfig, out_dir: &Path) -> Result<AnalysisReport> {
    let (lca, side) = load_matrix(&inputs.lcam)?;
    analyze_loaded(&lca, &side, inputs, acfg, out_dir)
}

pub fn analyze_loaded(
    lca: &LcaMatrix,
    side: &LcamSidecar,
    inputs: &AnalyzeInputs,
    acfg: &AnalysisConfig,
    out_dir: &Path,
) -> Result<AnalysisReport> {
    let layout = &side.layout;
    let prov = Provenance::new(&side.run_id, &side.config_hash, &lca.summary.options);
    let traj = inputs.trajectory.as_ref().map(Trajectory::open).transpose()?;
    if let Some(t) = &traj {
        if t.num_params() != lca.params() || t.num_iterations() != lca.steps() {
            return Err(Error::Contract(format!(
                "trajectory has K={}, T={} but the LCA matrix has K={}, T={}",
                t.num_params(),
                t.num_iterations(),
                lca.params(),
                lca.steps()
            )));
        }
    }
    let tensor: Option<ClassLcaTensor> = inputs.classes.as_deref().map(read_json).transpose()?;
    if let Some(t) = &tensor {
        check_tensor(t, lca, layout)?;
    }
    std::fs::create_dir_all(out_dir)?;
    let mut skipped = Vec::new();

    let help = if acfg.help {
        let stats = helping_stats(lca, layout, acfg.zero_tol);
        let mut w = csv_writer(&out_dir.join("help_per_iteration.csv"), &prov)?;
        w.write_record(["iteration", "helped", "hurt", "zero", "pct_helped_nonzero", "pct_zero"])
            .map_err(csv_err)?;
        for (t, c) in stats.per_iteration.iter().enumerate() {
            w.write_record([
                t.to_string(),
                c.helped.to_string(),
                c.hurt.to_string(),
                c.zero.to_string(),
                cell(c.pct_helped_nonzero()),
                c.pct_zero().to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)?;
        let hist = help_fraction_histogram(&stats, acfg.histogram_bins);
        let mut w = csv_writer(&out_dir.join("help_histogram.csv"), &prov)?;
        w.write_record(["bin_low", "bin_high", "weights"]).map_err(csv_err)?;
        for (b, n) in hist.counts.iter().enumerate() {
            w.write_record([
                hist.edges[b].to_string(),
                hist.edges[b + 1].to_string(),
                n.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)?;
        Some(HelpSummary {
            overall_pct_helped: stats.overall_pct_helped,
            overall_pct_zero: stats.overall_pct_zero,
            per_layer_pct_helped: stats.per_layer_pct_helped,
            histogram_mode: hist.mode_interval(),
            histogram: hist,
        })
    } else {
        None
    };

    let layers = if acfg.layers {
        let totals = layer_totals(lca, layout);
        let mut w = csv_writer(&out_dir.join("layer_totals.csv"), &prov)?;
        w.write_record(["layer", "total_lca"]).map_err(csv_err)?;
        for (n, v) in totals.names.iter().zip(&totals.totals) {
            w.write_record([n.clone(), v.to_string()]).map_err(csv_err)?;
        }
        w.write_record(["all".to_string(), totals.grand_total.to_string()])
            .map_err(csv_err)?;
        finish_csv(w)?;
        let series = layer_series(lca, layout);
        let mut w = csv_writer(&out_dir.join("layer_series.csv"), &prov)?;
        let mut header = vec!["iteration".to_string()];
        header.extend(totals.names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for t in 0..lca.steps() {
            let mut rec = vec![t.to_string()];
            rec.extend(series.iter().map(|s| s[t].to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        finish_csv(w)?;
        Some(totals)
    } else {
        None
    };

    let oscillation = match (acfg.oscillation, &traj) {
        (false, _) => None,
        (true, None) => {
            skipped.push("oscillation: no trajectory given".into());
            None
        }
        (true, Some(t)) => {
            let r = oscillation_counts(t, layout, side.gradient_sign.as_ref())?;
            let mut w = csv_writer(&out_dir.join("oscillation.csv"), &prov)?;
            w.write_record([
                "layer",
                "weight_changes",
                "weight_span",
                "weight_period",
                "gradient_changes",
                "gradient_span",
                "gradient_period",
            ])
            .map_err(csv_err)?;
            let mut names: Vec<String> = (0..layout.num_layers()).map(|l| layout.layer_name(l)).collect();
            names.push("all".into());
            for (l, name) in names.iter().enumerate() {
                let wp = r.weight.per_layer.get(l).unwrap_or(&r.weight.overall);
                let gp = r
                    .gradient
                    .as_ref()
                    .map(|g| g.per_layer.get(l).unwrap_or(&g.overall).clone());
                w.write_record([
                    name.clone(),
                    wp.changes.to_string(),
                    wp.span.to_string(),
                    cell(wp.period()),
                    gp.as_ref().map(|g| g.changes.to_string()).unwrap_or_default(),
                    gp.as_ref().map(|g| g.span.to_string()).unwrap_or_default(),
                    cell(gp.as_ref().and_then(|g| g.period())),
                ])
                .map_err(csv_err)?;
            }
            finish_csv(w)?;
            Some(r)
        }
    };

    let tails = if acfg.tails {
        let opts = TailOptions {
            sigma_cut: acfg.tail_sigma,
            exclude_zeros: true,
        };
        let overall = tail_stats(lca, &[0..lca.steps()], &opts)?.remove(0);
        let windows = tail_stats(lca, &equal_windows(lca.steps(), acfg.tail_windows), &opts)?;
        let mut w = csv_writer(&out_dir.join("tails.csv"), &prov)?;
        w.write_record([
            "start",
            "end",
            "samples",
            "mean",
            "std",
            "excess_kurtosis",
            "kurtosis_z",
            "kurtosis_p",
            "tail_mass_ratio",
        ])
        .map_err(csv_err)?;
        for win in std::iter::once(&overall).chain(&windows) {
            w.write_record([
                win.start.to_string(),
                win.end.to_string(),
                win.samples.to_string(),
                cell(Some(win.mean)),
                cell(Some(win.std)),
                cell(win.excess_kurtosis),
                cell(win.kurtosis_z),
                cell(win.kurtosis_p),
                cell(win.tail_mass_ratio),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)?;
        Some(TailSummary { overall, windows })
    } else {
        None
    };

    let sync = match (acfg.sync, &tensor) {
        (false, _) => None,
        (true, None) => {
            skipped.push("sync: no per-class tensor (run lca with per_class = true)".into());
            None
        }
        (true, Some(t)) if layout.num_layers() < 2 => {
            skipped.push(format!("sync: needs at least two layers, tensor from {} classes has one", t.classes));
            None
        }
        (true, Some(t)) => {
            let series = class_layer_series(t, layout);
            let groups: Vec<Vec<Vec<usize>>> = series
                .iter()
                .map(|layers| layers.iter().map(|s| detect_peaks(s, acfg.peaks_k)).collect())
                .collect();
            let opts = AlignmentOptions {
                trials: acfg.sync_trials,
                threshold: acfg.sync_threshold,
                seed: acfg.sync_seed,
                ..AlignmentOptions::default()
            };
            let r = alignment_test(&groups, &opts)?;
            let mut w = csv_writer(&out_dir.join("sync.csv"), &prov)?;
            w.write_record(["class", "aligned", "iterations"]).map_err(csv_err)?;
            for (c, a) in r.aligned.iter().enumerate() {
                let its: Vec<String> = a.iter().map(|t| t.to_string()).collect();
                w.write_record([c.to_string(), a.len().to_string(), its.join(" ")])
                    .map_err(csv_err)?;
            }
            finish_csv(w)?;
            Some(SyncSummary {
                peaks_k: acfg.peaks_k,
                classes: t.classes,
                layers: layout.num_layers(),
                aligned: r.aligned,
                observed: r.observed,
                baseline_mean: r.baseline_mean,
                baseline_std: r.baseline_std,
                p_value: r.p_value,
                trials: acfg.sync_trials,
            })
        }
    };

    let specialization = match (acfg.specialization, &tensor) {
        (false, _) => None,
        (true, None) => {
            skipped.push("specialization: no per-class tensor (run lca with per_class = true)".into());
            None
        }
        (true, Some(t)) => {
            let s = neuron_specialization(t, layout, 2, acfg.specialization_threshold)?;
            let mut w = csv_writer(&out_dir.join("specialization.csv"), &prov)?;
            w.write_record(["layer", "neurons", "excluded", "specialized", "fraction"])
                .map_err(csv_err)?;
            for l in &s {
                w.write_record([
                    layout.layer_name(l.layer),
                    l.neurons.to_string(),
                    l.excluded.to_string(),
                    l.specialized.to_string(),
                    l.fraction.to_string(),
                ])
                .map_err(csv_err)?;
            }
            finish_csv(w)?;
            Some(s)
        }
    };

    let fanio = if acfg.fanio {
        let f = fanio_correlation(lca, layout, acfg.fanio_seed)?;
        let mut w = csv_writer(&out_dir.join("fanio.csv"), &prov)?;
        w.write_record(["layer", "same_output", "same_input", "fake", "fake_group_size", "constant_weights"])
            .map_err(csv_err)?;
        for l in &f {
            w.write_record([
                layout.layer_name(l.layer),
                cell(l.same_output),
                cell(l.same_input),
                cell(l.fake),
                l.fake_group_size.to_string(),
                l.constant_weights.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)?;
        Some(f)
    } else {
        None
    };

    for s in &skipped {
        log::warn!("{}: skipped {s}", side.run_id);
    }
    let report = AnalysisReport {
        provenance: prov,
        steps: lca.steps(),
        params: lca.params(),
        loss_change: lca.summary.loss_change(),
        cumulative_error_pct: lca.cumulative_error_pct(),
        help,
        layers,
        oscillation,
        tails,
        sync,
        specialization,
        fanio,
        skipped,
    };
    write_json(&out_dir.join("summary.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub runs: Vec<String>,
    pub totals: Vec<LayerTotals>,
    pub significance: Vec<LayerSignificance>,
}

/// Layer totals of several runs and their across-run significance.
pub fn analyze_runs(lcams: &[PathBuf], out_dir: &Path) -> Result<MultiRunReport> {
    let mut runs = Vec::new();
    let mut totals = Vec::new();
    let mut first: Option<(LayerLayout, Provenance)> = None;
    for p in lcams {
        let (lca, side) = load_matrix(p)?;
        match &first {
            None => {
                first = Some((
                    side.layout.clone(),
                    Provenance::new("multi", &side.config_hash, &lca.summary.options),
                ))
            }
            Some((layout, _)) if *layout != side.layout => {
                return Err(Error::Contract(format!(
                    "{} has a different layout from the first run",
                    p.display()
                )))
            }
            _ => {}
        }
        totals.push(layer_totals(&lca, &side.layout));
        runs.push(side.run_id);
    }
    let (layout, prov) = first.ok_or_else(|| Error::Contract("no LCAM files given".into()))?;
    let significance = layer_significance(&totals)?;
    std::fs::create_dir_all(out_dir)?;
    let mut w = csv_writer(&out_dir.join("layer_significance.csv"), &prov)?;
    w.write_record(["layer", "runs", "mean", "std", "t", "p", "negative", "positive", "sign_p"])
        .map_err(csv_err)?;
    for s in &significance {
        w.write_record([
            layout.layer_name(s.layer),
            s.runs.to_string(),
            s.mean.to_string(),
            s.std.to_string(),
            cell(Some(s.t_statistic)),
            cell(Some(s.p_value)),
            s.negative.to_string(),
            s.positive.to_string(),
            s.sign_p_value.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)?;
    let report = MultiRunReport {
        runs,
        totals,
        significance,
    };
    write_json(&out_dir.join("multi_summary.json"), &report)?;
    Ok(report)
}

/// Every `*.lcam` file directly inside each run directory under `root`
/// (and in `root` itself), first-order diagnostics excluded.
pub fn find_lcams(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut dirs = vec![root.to_path_buf()];
    for e in std::fs::read_dir(root)? {
        let e = e?;
        if e.file_type()?.is_dir() {
            dirs.push(e.path());
        }
    }
    for d in dirs {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
            if name.ends_with(".lcam") && !name.ends_with(".first-order.lcam") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
