//! `LCAM` allocation matrix files.
//!
//! ```text
//! "LCAM" | version u16 | T u64 | K u64 | tol f64
//! A: T rows of K f32, row-major by iteration
//! iter_error: T f64
//! depth: T u8
//! CRC-64/XZ of every preceding byte, u64
//! ```
//!
//! Everything is little-endian.  A JSON sidecar (`<file>.layout.json`)
//! carries the layer layout, the endpoint losses and the 64-bit running sums
//! needed to recompute the cumulative error without rounding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LcaMatrix, LcaSink, RunSummary, StepOutcome};
use crate::analysis::SignChangeSummary;
use crate::error::{Error, Result};
use crate::nn::LayerLayout;
use crate::trajectory::CRC64;

pub const LCAM_MAGIC: &[u8; 4] = b"LCAM";
pub const LCAM_VERSION: u16 = 1;
const HEADER_LEN: u64 = 4 + 2 + 8 + 8 + 8;

/// Provenance and bookkeeping stored next to an `LCAM` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcamSidecar {
    pub run_id: String,
    pub config_hash: String,
    pub layout: LayerLayout,
    pub summary: RunSummary,
    /// Sign changes of the full-data gradient, gathered from the endpoint
    /// evaluations during integration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_sign: Option<SignChangeSummary>,
}

/// Path of the sidecar belonging to `lcam`.
pub fn sidecar_path(lcam: &Path) -> PathBuf {
    let mut name = lcam.file_name().unwrap_or_default().to_os_string();
    name.push(".layout.json");
    lcam.with_file_name(name)
}

struct HashingWriter {
    inner: BufWriter<File>,
    digest: crc::Digest<'static, u64>,
    written: u64,
}

impl HashingWriter {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.digest.update(bytes);
        self.inner.write_all(bytes)?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

/// Streams rows to disk as the integrator produces them.
pub struct LcamWriter {
    path: PathBuf,
    out: HashingWriter,
    steps: usize,
    params: usize,
    iter_error: Vec<f64>,
    depth: Vec<u8>,
    row: Vec<u8>,
}

impl LcamWriter {
    pub fn create(path: impl AsRef<Path>, steps: usize, params: usize, tol: f64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path)?;
        let mut out = HashingWriter {
            inner: BufWriter::with_capacity(1 << 20, file),
            digest: CRC64.digest(),
            written: 0,
        };
        out.put(LCAM_MAGIC)?;
        out.put(&LCAM_VERSION.to_le_bytes())?;
        out.put(&(steps as u64).to_le_bytes())?;
        out.put(&(params as u64).to_le_bytes())?;
        out.put(&tol.to_le_bytes())?;
        Ok(Self {
            path,
            out,
            steps,
            params,
            iter_error: Vec::with_capacity(steps),
            depth: Vec::with_capacity(steps),
            row: Vec::with_capacity(params * 4),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Write the trailing arrays, checksum and sidecar.
    pub fn finish(mut self, sidecar: &LcamSidecar) -> Result<PathBuf> {
        if self.iter_error.len() != self.steps {
            return Err(Error::Contract(format!(
                "LCAM writer received {} of {} rows",
                self.iter_error.len(),
                self.steps
            )));
        }
        let mut tail = Vec::with_capacity(self.steps * 9);
        for e in &self.iter_error {
            tail.extend_from_slice(&e.to_le_bytes());
        }
        tail.extend_from_slice(&self.depth);
        self.out.put(&tail)?;
        let crc = self.out.digest.finalize();
        self.out.inner.write_all(&crc.to_le_bytes())?;
        let file = self.out.inner.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        file.sync_all()?;

        let json = serde_json::to_vec_pretty(sidecar).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(sidecar_path(&self.path), json)?;
        Ok(self.path)
    }
}

impl LcaSink for LcamWriter {
    fn on_step(&mut self, step: &StepOutcome) -> Result<()> {
        if step.allocation.len() != self.params {
            return Err(Error::Contract(format!(
                "row has {} entries, file expects {}",
                step.allocation.len(),
                self.params
            )));
        }
        if self.iter_error.len() == self.steps {
            return Err(Error::Contract("LCAM file already holds every row".into()));
        }
        self.row.clear();
        for v in &step.allocation {
            self.row.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let row = std::mem::take(&mut self.row);
        self.out.put(&row)?;
        self.row = row;
        self.iter_error.push(step.residual);
        self.depth.push(step.depth);
        Ok(())
    }
}

/// Raw contents of an `LCAM` file.
#[derive(Debug, Clone, PartialEq)]
pub struct LcamFile {
    pub steps: usize,
    pub params: usize,
    pub tol: f64,
    /// Row-major, widened from the stored 32-bit values.
    pub values: Vec<f64>,
    pub iter_error: Vec<f64>,
    pub depth: Vec<u8>,
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Read and verify an `LCAM` file.
pub fn read_lcam(path: impl AsRef<Path>) -> Result<LcamFile> {
    let path = path.as_ref();
    let mut file = BufReader::with_capacity(1 << 20, File::open(path)?);
    let total = file.get_ref().metadata()?.len();
    if total < HEADER_LEN + 8 {
        return Err(Error::Format(format!("{} is too short for an LCAM file", path.display())));
    }
    let mut header = [0u8; HEADER_LEN as usize];
    file.read_exact(&mut header)?;
    if &header[..4] != LCAM_MAGIC {
        return Err(Error::Format(format!("{} is not an LCAM file", path.display())));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != LCAM_VERSION {
        return Err(Error::Format(format!("unsupported LCAM version {version}")));
    }
    let steps = u64_at(&header, 6);
    let params = u64_at(&header, 14);
    let tol = f64::from_le_bytes(header[22..30].try_into().unwrap());
    let expected = steps
        .checked_mul(params)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(steps * 9 + HEADER_LEN + 8))
        .ok_or_else(|| Error::Format("LCAM dimensions overflow".into()))?;
    if expected != total {
        return Err(Error::Format(format!(
            "{}: size {total} does not match T={steps}, K={params} (expected {expected})",
            path.display()
        )));
    }
    let (steps, params) = (steps as usize, params as usize);
    let mut digest = CRC64.digest();
    digest.update(&header);

    let mut values = Vec::with_capacity(steps * params);
    let mut row = vec![0u8; params * 4];
    for _ in 0..steps {
        file.read_exact(&mut row)?;
        digest.update(&row);
        values.extend(
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
        );
    }
    let mut tail = vec![0u8; steps * 9];
    file.read_exact(&mut tail)?;
    digest.update(&tail);
    let mut stored = [0u8; 8];
    file.read_exact(&mut stored)?;
    if digest.finalize() != u64::from_le_bytes(stored) {
        return Err(Error::Integrity(format!("{}: checksum mismatch", path.display())));
    }
    let iter_error = tail[..steps * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let depth = tail[steps * 8..].to_vec();
    Ok(LcamFile {
        steps,
        params,
        tol,
        values,
        iter_error,
        depth,
    })
}

pub fn read_sidecar(lcam: impl AsRef<Path>) -> Result<LcamSidecar> {
    let p = sidecar_path(lcam.as_ref());
    let text = std::fs::read(&p)?;
    serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
}

/// Matrix and sidecar, cross-checked against each other.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<(LcaMatrix, LcamSidecar)> {
    let path = path.as_ref();
    let file = read_lcam(path)?;
    let side = read_sidecar(path)?;
    let s = &side.summary;
    if s.steps != file.steps || s.params != file.params || side.layout.len() != file.params {
        return Err(Error::Contract(format!(
            "sidecar describes T={}, K={} but {} holds T={}, K={}",
            s.steps,
            s.params,
            path.display(),
            file.steps,
            file.params
        )));
    }
    if s.iter_error != file.iter_error || s.depth != file.depth {
        return Err(Error::Integrity("sidecar error accounting differs from matrix file".into()));
    }
    let m = LcaMatrix::from_parts(side.summary.clone(), file.values)?;
    Ok((m, side))
}
