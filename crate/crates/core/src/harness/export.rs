//! Flat CSV views of binary artifacts.

use std::ops::Range;
use std::path::Path;

use super::report::{cell, csv_err, csv_writer, finish_csv, Provenance};
use crate::analysis::{helping_stats, layer_series};
use crate::engine::load_matrix;
use crate::error::{Error, Result};
use crate::trajectory::{SnapshotSource, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExportKind {
    /// One row per parameter: location, total LCA, help fraction.
    Params,
    /// Long format `(iteration, param, value)` over an iteration range.
    Matrix(Range<usize>),
    /// Instantaneous layer LCA, one column per layer.
    Layers,
}

/// Export an LCAM file as CSV.  Returns the number of data rows written.
pub fn export_lcam(lcam: &Path, kind: &ExportKind, out: &Path) -> Result<usize> {
    let (lca, side) = load_matrix(lcam)?;
    let layout = &side.layout;
    let prov = Provenance::new(&side.run_id, &side.config_hash, &lca.summary.options);
    let mut w = csv_writer(out, &prov)?;
    let mut rows = 0;
    match kind {
        ExportKind::Params => {
            let totals = lca.totals_per_param();
            let help = helping_stats(&lca, layout, 0.0);
            w.write_record(["param", "entry", "layer", "row", "col", "total_lca", "help_fraction"])
                .map_err(csv_err)?;
            for (i, total) in totals.iter().enumerate() {
                let site = layout.locate(i)?;
                w.write_record([
                    i.to_string(),
                    layout.entries()[site.entry].name.clone(),
                    site.layer.to_string(),
                    site.row.to_string(),
                    site.col.to_string(),
                    total.to_string(),
                    cell(help.per_weight_help_fraction[i]),
                ])
                .map_err(csv_err)?;
                rows += 1;
            }
        }
        ExportKind::Matrix(range) => {
            if range.start >= range.end || range.end > lca.steps() {
                return Err(Error::Range {
                    index: range.end.max(range.start),
                    len: lca.steps(),
                });
            }
            w.write_record(["iteration", "param", "lca"]).map_err(csv_err)?;
            for t in range.clone() {
                for (i, v) in lca.row(t).iter().enumerate() {
                    w.write_record([t.to_string(), i.to_string(), v.to_string()])
                        .map_err(csv_err)?;
                    rows += 1;
                }
            }
        }
        ExportKind::Layers => {
            let series = layer_series(&lca, layout);
            let mut header = vec!["iteration".to_string()];
            header.extend((0..layout.num_layers()).map(|l| layout.layer_name(l)));
            header.extend(["loss_change".to_string(), "residual".to_string()]);
            w.write_record(&header).map_err(csv_err)?;
            let s = &lca.summary;
            for t in 0..lca.steps() {
                let mut rec = vec![t.to_string()];
                rec.extend(series.iter().map(|x| x[t].to_string()));
                rec.push((s.losses[t + 1] - s.losses[t]).to_string());
                rec.push(s.iter_error[t].to_string());
                w.write_record(&rec).map_err(csv_err)?;
                rows += 1;
            }
        }
    }
    finish_csv(w)?;
    Ok(rows)
}

/// Write snapshot θ_t of a trajectory as `(param, entry, value)` rows.
pub fn export_snapshot(trajectory: &Path, t: usize, out: &Path) -> Result<usize> {
    let traj = Trajectory::open(trajectory)?;
    let layout = traj.layout().clone();
    let meta = traj.meta();
    let prov = Provenance {
        run_id: meta.run_id.clone(),
        config_hash: meta.config_hash.clone(),
        tol: f64::NAN,
        max_depth: 0,
        method: crate::engine::Method::Simpson,
    };
    if t > traj.num_iterations() {
        return Err(Error::Range {
            index: t,
            len: traj.num_iterations() + 1,
        });
    }
    let theta = traj.snapshot(t)?;
    let mut w = csv_writer(out, &prov)?;
    w.write_record(["param", "entry", "value"]).map_err(csv_err)?;
    for (i, v) in theta.values().iter().enumerate() {
        let site = layout.locate(i)?;
        w.write_record([
            i.to_string(),
            layout.entries()[site.entry].name.clone(),
            v.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)?;
    Ok(theta.len())
}
