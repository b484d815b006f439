use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{DatasetConfig, SyntheticSpec, DATA_ROOT_ENV};
use crate::error::{Error, Result};
use crate::nn::Dataset;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Stratified subset request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subset {
    pub size: usize,
    pub seed: u64,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(b: &[u8], at: usize, path: &Path) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{}: truncated IDX header", path.display())))
}

/// Parse IDX image / label files (raw or gzip), scale pixels by 1/255 and
/// optionally keep a stratified subset.
pub fn load_mnist_idx(images: &Path, labels: &Path, subset: Option<Subset>) -> Result<Dataset> {
    let img = read_maybe_gz(images)?;
    let lab = read_maybe_gz(labels)?;
    if be_u32(&img, 0, images)? != IMAGE_MAGIC {
        return Err(Error::Format(format!("{}: not an IDX image file", images.display())));
    }
    if be_u32(&lab, 0, labels)? != LABEL_MAGIC {
        return Err(Error::Format(format!("{}: not an IDX label file", labels.display())));
    }
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let nl = be_u32(&lab, 4, labels)? as usize;
    if n != nl {
        return Err(Error::Format(format!("{n} images but {nl} labels")));
    }
    let d = rows * cols;
    if img.len() != 16 + n * d {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for {n} images of {rows}x{cols}, found {}",
            images.display(),
            16 + n * d,
            img.len()
        )));
    }
    if lab.len() != 8 + n {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            labels.display(),
            8 + n,
            lab.len()
        )));
    }
    let label_bytes = &lab[8..];
    if let Some(bad) = label_bytes.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("label {bad} outside 0..=9")));
    }
    let features: Vec<f64> = img[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let labels_u32: Vec<u32> = label_bytes.iter().map(|&l| l as u32).collect();
    let id = format!("mnist:{}", images.file_name().unwrap_or_default().to_string_lossy());
    let full = Dataset::new(id.clone(), features, d, labels_u32, 10)?;
    match subset {
        None => Ok(full),
        Some(s) => {
            let idx = stratified_indices(&full, s)?;
            full.select(format!("{id}/strat{}-seed{}", s.size, s.seed), &idx)
        }
    }
}

/// Equal shares per class (the first `size % C` classes get one extra), each
/// drawn by a seeded shuffle; returned in ascending order.
pub fn stratified_indices(data: &Dataset, s: Subset) -> Result<Vec<usize>> {
    let c = data.num_classes();
    if s.size == 0 || s.size > data.len() {
        return Err(Error::Config(format!(
            "subset size {} not in 1..={}",
            s.size,
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut out = Vec::with_capacity(s.size);
    for (class, members) in data.class_index().iter().enumerate() {
        let want = s.size / c + usize::from(class < s.size % c);
        if members.len() < want {
            return Err(Error::Data(format!(
                "class {class} has {} examples, subset needs {want}",
                members.len()
            )));
        }
        let mut m = members.clone();
        m.shuffle(&mut rng);
        out.extend_from_slice(&m[..want]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Gaussian class clusters: means `separation · u_c` with u_c random unit
/// vectors, unit within-class noise, labels `i mod C`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n < spec.c || spec.c < 1 || spec.d == 0 || !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(Error::Config(format!("invalid synthetic dataset spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.c)
        .map(|_| {
            let v: Vec<f64> = (0..spec.d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| spec.separation * x / norm).collect()
        })
        .collect();
    let mut features = Vec::with_capacity(spec.n * spec.d);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let y = i % spec.c;
        for j in 0..spec.d {
            let e: f64 = StandardNormal.sample(&mut rng);
            features.push(means[y][j] + e);
        }
        labels.push(y as u32);
    }
    Dataset::new(
        format!(
            "synthetic:n{}-d{}-c{}-sep{}-seed{}",
            spec.n, spec.d, spec.c, spec.separation, spec.seed
        ),
        features,
        spec.d,
        labels,
        spec.c,
    )
}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")))
}

/// First existing MNIST training pair under the data root: the standard
/// 60k files, then the bundled 10k files.
pub fn default_mnist_paths() -> Result<(PathBuf, PathBuf)> {
    let root = data_root().join("mnist");
    let pairs = [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
        ("mnist10k-images-idx3-ubyte.gz", "mnist10k-labels-idx1-ubyte.gz"),
    ];
    for (i, l) in pairs {
        let (i, l) = (root.join(i), root.join(l));
        if i.exists() && l.exists() {
            return Ok((i, l));
        }
    }
    Err(Error::Data(format!(
        "no MNIST IDX files under {} (set {DATA_ROOT_ENV})",
        root.display()
    )))
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    match cfg {
        DatasetConfig::Synthetic(s) => gen_synthetic(s),
        DatasetConfig::Mnist {
            images,
            labels,
            subset_size,
            subset_seed,
        } => {
            let (i, l) = match (images, labels) {
                (Some(i), Some(l)) => (i.clone(), l.clone()),
                (None, None) => default_mnist_paths()?,
                _ => {
                    return Err(Error::Config(
                        "give both MNIST image and label paths or neither".into(),
                    ))
                }
            };
            let subset = subset_size.map(|size| Subset {
                size,
                seed: *subset_seed,
            });
            load_mnist_idx(&i, &l, subset)
        }
    }
}
