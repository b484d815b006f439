//! Parameter trajectories and the `LCAT` file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LCAT" | version u16 | K u64 | T u64 | precision u8
//! T + 1 snapshot blocks of K values (f32 or f64)
//! metadata block: UTF-8 JSON, running up to the checksum
//! CRC-64/XZ of every preceding byte, u64
//! ```
//!
//! While a file is being written its `T` field holds `u64::MAX`; a file left
//! in that state (crash, full disk) is rejected on open as partial.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerLayout, ParamVector};
use crate::optim::OptimConfig;

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"LCAT";
pub const TRAJECTORY_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 4 + 2 + 8 + 8 + 1;
const PARTIAL: u64 = u64::MAX;

pub(crate) static CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    fn flag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    fn from_flag(f: u8) -> Result<Self> {
        match f {
            0 => Ok(Precision::F32),
            1 => Ok(Precision::F64),
            other => Err(Error::Format(format!("unknown precision flag {other}"))),
        }
    }

    /// Round `v` to what this precision stores.
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Failed { iteration: usize, reason: String },
}

/// Run metadata stored in the trailing block of a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub run_id: String,
    pub seed: u64,
    pub arch: Vec<usize>,
    pub optimizer: OptimConfig,
    pub dataset_id: String,
    #[serde(default)]
    pub config_hash: String,
    /// How mini-batches were drawn.
    pub sampling: String,
    /// Mean loss of the mini-batch used at each step.
    #[serde(default)]
    pub minibatch_loss: Vec<f64>,
    /// Full training-set loss at each snapshot, when it was computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<Vec<f64>>,
    /// Example indices of the mini-batch used at each step.
    #[serde(default)]
    pub batches: Vec<Vec<u32>>,
    pub status: RunStatus,
}

/// Anything that can hand out the snapshots θ_0..θ_T of a trajectory.
pub trait SnapshotSource: Sync {
    /// Number of optimizer steps T (snapshots are 0..=T).
    fn num_iterations(&self) -> usize;
    fn num_params(&self) -> usize;
    fn snapshot_into(&self, t: usize, out: &mut [f64]) -> Result<()>;

    fn snapshot_vec(&self, t: usize) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.num_params()];
        self.snapshot_into(t, &mut v)?;
        Ok(v)
    }
}

/// θ_{t+1} − θ_t in 64-bit.
pub fn delta<S: SnapshotSource + ?Sized>(traj: &S, t: usize) -> Result<Vec<f64>> {
    let steps = traj.num_iterations();
    if t >= steps {
        return Err(Error::Range { index: t, len: steps });
    }
    let mut next = traj.snapshot_vec(t + 1)?;
    let prev = traj.snapshot_vec(t)?;
    for (n, p) in next.iter_mut().zip(&prev) {
        *n -= p;
    }
    Ok(next)
}

/// Trajectory held in memory; used for synthetic landscapes and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryTrajectory {
    snapshots: Vec<Vec<f64>>,
}

impl MemoryTrajectory {
    pub fn new(snapshots: Vec<Vec<f64>>) -> Result<Self> {
        let k = snapshots.first().map(Vec::len).unwrap_or(0);
        if snapshots.len() < 2 {
            return Err(Error::Contract("a trajectory needs at least two snapshots".into()));
        }
        if snapshots.iter().any(|s| s.len() != k) {
            return Err(Error::Contract("snapshots differ in length".into()));
        }
        Ok(Self { snapshots })
    }

    pub fn snapshots(&self) -> &[Vec<f64>] {
        &self.snapshots
    }
}

impl SnapshotSource for MemoryTrajectory {
    fn num_iterations(&self) -> usize {
        self.snapshots.len() - 1
    }

    fn num_params(&self) -> usize {
        self.snapshots[0].len()
    }

    fn snapshot_into(&self, t: usize, out: &mut [f64]) -> Result<()> {
        let s = self.snapshots.get(t).ok_or(Error::Range {
            index: t,
            len: self.snapshots.len(),
        })?;
        out.copy_from_slice(s);
        Ok(())
    }
}

/// Append-only writer for a trajectory file.
pub struct TrajectoryWriter {
    out: BufWriter<File>,
    path: PathBuf,
    k: usize,
    precision: Precision,
    count: u64,
    buf: Vec<u8>,
}

impl TrajectoryWriter {
    pub fn create(path: impl AsRef<Path>, layout: &LayerLayout, precision: Precision) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        // read access is needed to checksum the finished file
        let file = std::fs::OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        out.write_all(TRAJECTORY_MAGIC)?;
        out.write_all(&TRAJECTORY_VERSION.to_le_bytes())?;
        out.write_all(&(layout.len() as u64).to_le_bytes())?;
        out.write_all(&PARTIAL.to_le_bytes())?;
        out.write_all(&[precision.flag()])?;
        Ok(Self {
            out,
            path,
            k: layout.len(),
            precision,
            count: 0,
            buf: Vec::with_capacity(layout.len() * precision.width()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Snapshots written so far.
    pub fn len(&self) -> usize {
        self.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn append(&mut self, theta: &ParamVector) -> Result<()> {
        if theta.len() != self.k {
            return Err(Error::Contract(format!(
                "snapshot has {} values, trajectory stores {}",
                theta.len(),
                self.k
            )));
        }
        theta.check_finite().map_err(|e| e.at_iteration(self.count as usize))?;
        self.buf.clear();
        match self.precision {
            Precision::F32 => {
                for v in theta.values() {
                    self.buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            Precision::F64 => {
                for v in theta.values() {
                    self.buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        self.out.write_all(&self.buf)?;
        self.count += 1;
        Ok(())
    }

    /// Write metadata, patch the iteration count and append the checksum.
    pub fn finish(mut self, meta: &TrajectoryMeta) -> Result<PathBuf> {
        if self.count == 0 {
            return Err(Error::Contract("cannot finalize a trajectory without snapshots".into()));
        }
        if self.count < 2 && meta.status == RunStatus::Complete {
            return Err(Error::Contract(
                "a complete trajectory needs at least one step".into(),
            ));
        }
        let json = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
        self.out.write_all(&json)?;
        self.out.flush()?;
        let mut file = self.out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        file.seek(SeekFrom::Start(14))?;
        file.write_all(&(self.count - 1).to_le_bytes())?;
        file.flush()?;
        file.seek(SeekFrom::Start(0))?;
        let crc = crc_of_reader(&mut file, u64::MAX)?;
        file.seek(SeekFrom::End(0))?;
        file.write_all(&crc.to_le_bytes())?;
        file.sync_all()?;
        Ok(self.path)
    }
}

fn crc_of_reader<R: Read>(r: &mut R, limit: u64) -> Result<u64> {
    let mut digest = CRC64.digest();
    let mut buf = vec![0u8; 1 << 20];
    let mut remaining = limit;
    while remaining > 0 {
        let want = buf.len().min(remaining.min(usize::MAX as u64) as usize);
        let got = r.read(&mut buf[..want])?;
        if got == 0 {
            break;
        }
        digest.update(&buf[..got]);
        remaining -= got as u64;
    }
    Ok(digest.finalize())
}

#[cfg(unix)]
pub(crate) fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
pub(crate) fn read_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        let n = file.seek_read(buf, offset)?;
        if n == 0 {
            return Err(std::io::ErrorKind::UnexpectedEof.into());
        }
        buf = &mut buf[n..];
        offset += n as u64;
    }
    Ok(())
}

/// Finalized trajectory file with random access to snapshots.
#[derive(Debug)]
pub struct Trajectory {
    file: File,
    path: PathBuf,
    k: usize,
    t: usize,
    precision: Precision,
    meta: TrajectoryMeta,
    layout: Arc<LayerLayout>,
}

impl Trajectory {
    /// Open and verify a trajectory file (checksum over the whole file).
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path)?;
        let file_len = file.metadata()?.len();
        if file_len < HEADER_LEN + 8 {
            return Err(Error::Integrity(format!(
                "{}: truncated ({file_len} bytes)",
                path.display()
            )));
        }
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header)?;
        if &header[0..4] != TRAJECTORY_MAGIC {
            return Err(Error::Format(format!("{}: not an LCAT file", path.display())));
        }
        let version = u16::from_le_bytes(header[4..6].try_into().unwrap());
        if version != TRAJECTORY_VERSION {
            return Err(Error::Format(format!("unsupported LCAT version {version}")));
        }
        let k = u64::from_le_bytes(header[6..14].try_into().unwrap());
        let t = u64::from_le_bytes(header[14..22].try_into().unwrap());
        let precision = Precision::from_flag(header[22])?;
        if t == PARTIAL {
            return Err(Error::Integrity(format!(
                "{}: partial trajectory (never finalized)",
                path.display()
            )));
        }
        let body = (t + 1)
            .checked_mul(k)
            .and_then(|v| v.checked_mul(precision.width() as u64))
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        let meta_start = HEADER_LEN + body;
        if file_len < meta_start + 8 {
            return Err(Error::Integrity(format!(
                "{}: truncated (expected at least {} bytes, found {file_len})",
                path.display(),
                meta_start + 8
            )));
        }
        file.seek(SeekFrom::Start(0))?;
        let crc = crc_of_reader(&mut file, file_len - 8)?;
        let mut stored = [0u8; 8];
        file.read_exact(&mut stored)?;
        if crc != u64::from_le_bytes(stored) {
            return Err(Error::Integrity(format!("{}: checksum mismatch", path.display())));
        }
        let mut meta_bytes = vec![0u8; (file_len - 8 - meta_start) as usize];
        read_at(&file, &mut meta_bytes, meta_start)?;
        let meta: TrajectoryMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::Format(format!("trajectory metadata: {e}")))?;
        let layout = Arc::new(LayerLayout::for_widths(&meta.arch)?);
        if layout.len() as u64 != k {
            return Err(Error::Format(format!(
                "metadata architecture has {} parameters, header says {k}",
                layout.len()
            )));
        }
        Ok(Self {
            file,
            path,
            k: k as usize,
            t: t as usize,
            precision,
            meta,
            layout,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn snapshot(&self, t: usize) -> Result<ParamVector> {
        let mut v = vec![0.0; self.k];
        self.snapshot_into(t, &mut v)?;
        ParamVector::new(self.layout.clone(), v)
    }

    pub fn delta(&self, t: usize) -> Result<Vec<f64>> {
        delta(self, t)
    }
}

impl SnapshotSource for Trajectory {
    fn num_iterations(&self) -> usize {
        self.t
    }

    fn num_params(&self) -> usize {
        self.k
    }

    fn snapshot_into(&self, t: usize, out: &mut [f64]) -> Result<()> {
        if t > self.t {
            return Err(Error::Range {
                index: t,
                len: self.t + 1,
            });
        }
        if out.len() != self.k {
            return Err(Error::Contract(format!(
                "snapshot buffer has {} slots, need {}",
                out.len(),
                self.k
            )));
        }
        let w = self.precision.width();
        let mut raw = vec![0u8; self.k * w];
        read_at(&self.file, &mut raw, HEADER_LEN + (t * self.k * w) as u64)?;
        match self.precision {
            Precision::F32 => {
                for (o, c) in out.iter_mut().zip(raw.chunks_exact(4)) {
                    *o = f32::from_le_bytes(c.try_into().unwrap()) as f64;
                }
            }
            Precision::F64 => {
                for (o, c) in out.iter_mut().zip(raw.chunks_exact(8)) {
                    *o = f64::from_le_bytes(c.try_into().unwrap());
                }
            }
        }
        Ok(())
    }
}
