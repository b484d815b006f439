use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{ClassAggregate, LcaOptions, Method};
use crate::error::{Error, Result};
use crate::nn::LayerLayout;
use crate::optim::OptimConfig;
use crate::trajectory::Precision;

/// Environment variable naming the directory that holds `mnist/`.
pub const DATA_ROOT_ENV: &str = "LCA_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    /// Distance scale of the class means in units of the within-class σ.
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        /// IDX image file (optionally gzip); resolved under the data root when
        /// omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<PathBuf>,
        /// Stratified subset size; the full file when omitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset_size: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LcaConfig {
    pub tol: f64,
    pub max_depth: u8,
    pub gate_pct: f64,
    pub method: Method,
    pub per_class: bool,
    pub class_aggregate: ClassAggregate,
}

impl Default for LcaConfig {
    fn default() -> Self {
        let o = LcaOptions::default();
        Self {
            tol: o.tol,
            max_depth: o.max_depth,
            gate_pct: o.gate_pct,
            method: o.method,
            per_class: false,
            class_aggregate: ClassAggregate::Layer,
        }
    }
}

impl LcaConfig {
    pub fn options(&self) -> LcaOptions {
        LcaOptions {
            tol: self.tol,
            max_depth: self.max_depth,
            gate_pct: self.gate_pct,
            method: self.method,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub help: bool,
    pub layers: bool,
    pub oscillation: bool,
    pub tails: bool,
    pub sync: bool,
    pub specialization: bool,
    pub fanio: bool,
    pub zero_tol: f64,
    pub histogram_bins: usize,
    pub tail_windows: usize,
    pub tail_sigma: f64,
    pub peaks_k: usize,
    pub sync_trials: usize,
    pub sync_threshold: f64,
    pub sync_seed: u64,
    pub specialization_threshold: f64,
    pub fanio_seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            help: true,
            layers: true,
            oscillation: true,
            tails: true,
            sync: true,
            specialization: true,
            fanio: false,
            zero_tol: 0.0,
            histogram_bins: 20,
            tail_windows: 4,
            tail_sigma: 2.0,
            peaks_k: 20,
            sync_trials: 10_000,
            sync_threshold: 1.0,
            sync_seed: 0,
            specialization_threshold: 0.8,
            fanio_seed: 0,
        }
    }
}

fn default_precision() -> Precision {
    Precision::F32
}

fn default_log_every() -> usize {
    50
}

/// Everything needed to reproduce one training + integration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub arch: Vec<usize>,
    pub iterations: usize,
    pub dataset: DatasetConfig,
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub lca: LcaConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Full training-set loss is logged every this many steps (0: only at
    /// the ends).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn layout(&self) -> Result<LayerLayout> {
        LayerLayout::for_widths(&self.arch).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(Error::Config(format!(
                "run_id '{}' must be non-empty and use only [A-Za-z0-9._-]",
                self.run_id
            )));
        }
        let layout = self.layout()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        self.optimizer.validate(&layout)?;
        self.lca.options().validate()?;
        match &self.dataset {
            DatasetConfig::Synthetic(s) => {
                if s.n < s.c || s.c < 2 || s.d == 0 || !(s.separation >= 0.0 && s.separation.is_finite()) {
                    return Err(Error::Config(format!("invalid synthetic dataset spec {s:?}")));
                }
                if s.d != self.arch[0] || s.c != *self.arch.last().unwrap() {
                    return Err(Error::Config(format!(
                        "synthetic data has D={}, C={} but arch is {:?}",
                        s.d, s.c, self.arch
                    )));
                }
            }
            DatasetConfig::Mnist { subset_size, .. } => {
                if self.arch[0] != 784 || *self.arch.last().unwrap() != 10 {
                    return Err(Error::Config(format!(
                        "MNIST needs arch [784, ..., 10], got {:?}",
                        self.arch
                    )));
                }
                if *subset_size == Some(0) {
                    return Err(Error::Config("subset_size must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, excluding `run_id`, `output_dir`
    /// and the analysis toggles, which do not change any artifact bits.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("run_id");
            m.remove("output_dir");
            m.remove("analysis");
        }
        let digest = Sha256::digest(canonical_json(&v).as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// MNIST-FC desk configuration: 5k stratified subset, [784, 100, 50, 10],
    /// SGD lr 0.05 momentum 0.9, batch 256, 880 steps.
    pub fn mnist_fc_desk(run_id: &str, seed: u64) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            arch: vec![784, 100, 50, 10],
            iterations: 880,
            dataset: DatasetConfig::Mnist {
                images: None,
                labels: None,
                subset_size: Some(5000),
                subset_seed: 0,
            },
            optimizer: OptimConfig::sgd(0.05, 0.9, 256),
            lca: LcaConfig::default(),
            analysis: AnalysisConfig::default(),
            output_dir: default_output(),
            precision: Precision::F32,
            log_every: default_log_every(),
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.lca.method = method;
        self
    }
}

/// JSON with object keys sorted at every level.
fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical_json(&m[*k])))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
run_id = "toy"
seed = 3
arch = [4, 8, 3]
iterations = 20

[dataset]
kind = "synthetic"
n = 90
d = 4
c = 3
separation = 2.0
seed = 1

[optimizer]
kind = "sgd"
lr = 0.1
momentum = 0.9
batch_size = 16

[optimizer.per_layer.dense_1]
frozen = true

[lca]
tol = 0.001
max_depth = 6
per_class = true
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.arch, vec![4, 8, 3]);
        assert!(cfg.lca.per_class);
        assert!(cfg.optimizer.per_layer["dense_1"].frozen);
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.config_hash(), cfg.config_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SAMPLE.replace("iterations = 20", "iterations = 20\nbogus = 1");
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = SAMPLE.replace("per_class = true", "per_class = true\ntoll = 2");
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = SAMPLE.replace("dense_1", "dense_7");
        assert!(matches!(RunConfig::from_toml(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content_not_names() {
        let a = RunConfig::from_toml(SAMPLE).unwrap();
        let mut b = a.clone();
        b.run_id = "other".into();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.optimizer.lr = 0.2;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 16);
    }

    #[test]
    fn mismatched_synthetic_shape() {
        let bad = SAMPLE.replace("d = 4", "d = 5");
        assert!(RunConfig::from_toml(&bad).is_err());
        let desk = RunConfig::mnist_fc_desk("d", 0);
        desk.validate().unwrap();
    }
}
