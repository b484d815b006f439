use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::engine::{LcaOptions, Method};
use crate::error::{Error, Result};

/// Identifies where a report came from; written as the first line of every
/// CSV and embedded in JSON summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub run_id: String,
    pub config_hash: String,
    pub tol: f64,
    pub max_depth: u8,
    pub method: Method,
}

impl Provenance {
    pub fn new(run_id: &str, config_hash: &str, opts: &LcaOptions) -> Self {
        Self {
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            tol: opts.tol,
            max_depth: opts.max_depth,
            method: opts.method,
        }
    }

    pub fn of(cfg: &RunConfig) -> Self {
        Self::new(&cfg.run_id, &cfg.config_hash(), &cfg.lca.options())
    }

    pub fn header_line(&self) -> String {
        let method = match self.method {
            Method::Simpson => "simpson",
            Method::FirstOrder => "first-order",
        };
        format!(
            "# run_id={}, config_hash={}, tol={}, max_depth={}, method={}",
            self.run_id, self.config_hash, self.tol, self.max_depth, method
        )
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(e.to_string())
    }
}

pub type CsvOut = csv::Writer<BufWriter<File>>;

/// CSV writer whose first line is the provenance comment.
pub fn csv_writer(path: &Path, prov: &Provenance) -> Result<CsvOut> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", prov.header_line())?;
    Ok(csv::Writer::from_writer(out))
}

pub fn finish_csv(w: CsvOut) -> Result<()> {
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?
        .flush()?;
    Ok(())
}

/// Records of a CSV written by [`csv_writer`], with its provenance line.
pub fn read_csv(path: &Path) -> Result<(String, Vec<csv::StringRecord>, csv::StringRecord)> {
    let text = std::fs::read_to_string(path)?;
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| Error::Format(format!("{}: empty report", path.display())))?;
    if !first.starts_with("# run_id=") {
        return Err(Error::Format(format!("{}: missing provenance line", path.display())));
    }
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let headers = r.headers().map_err(csv_err)?.clone();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>().map_err(csv_err)?;
    Ok((first.to_string(), rows, headers))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Format an optional float for a CSV cell (empty when absent or non-finite).
pub fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => String::new(),
    }
}
