//! Declarative run configuration: TOML sections with defaults for every
//! field, dotted-key overrides and a canonical hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::canonical_hash;
use crate::downstream::{FinetuneConfig, Task};
use crate::ehr::synthetic::SyntheticConfig;
use crate::embed::{EmbedConfig, EmbedderVariant};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::explain::{ExplainConfig, MaskStrategy, Modality};
use crate::pretrain::{ModelConfig, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: EmbedderVariant,
    pub k: usize,
    pub depth: usize,
    pub stacks: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub include_text: bool,
    pub decoder_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: EmbedderVariant::UmlsDualStack,
            k: 256,
            depth: 2,
            stacks: 2,
            n_heads: 2,
            n_layers: 1,
            ffn_mult: 4,
            include_text: false,
            decoder_hidden: 128,
        }
    }
}

impl ModelSection {
    pub fn embed(&self) -> EmbedConfig {
        EmbedConfig { variant: self.variant, k: self.k, depth: self.depth, stacks: self.stacks }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig { k: self.k, n_layers: self.n_layers, n_heads: self.n_heads, ffn_mult: self.ffn_mult }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { include_text: self.include_text, decoder_hidden: self.decoder_hidden }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: SyntheticConfig,
    /// Train, validation and test shares of the multi-visit patients.
    pub fractions: [f64; 3],
    /// Reject unknown concepts instead of dropping them.
    pub strict: bool,
    /// Width of generated node features; 0 learns raw node embeddings.
    pub feature_width: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { synthetic: SyntheticConfig::default(), fractions: [0.7, 0.1, 0.2], strict: true, feature_width: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub name: String,
    /// Readmission horizons for sweeps, in days.
    pub horizons_days: Vec<f64>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self { name: "heart-failure".into(), horizons_days: vec![182.5, 365.0, 730.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    /// Concept id to explain; the most frequent training disease if absent.
    pub concept: Option<String>,
    pub hops: usize,
    pub threshold: f64,
    pub mask: ExplainConfig,
    pub fractions: Vec<f64>,
    pub modalities: Vec<Modality>,
    pub strategies: Vec<MaskStrategy>,
    /// Visits ranked by attention.
    pub n_ranked_visits: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            concept: None,
            hops: 2,
            threshold: 0.5,
            mask: ExplainConfig::default(),
            fractions: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            modalities: vec![Modality::Diseases, Modality::Medications, Modality::Codes],
            strategies: vec![MaskStrategy::Random, MaskStrategy::Attention],
            n_ranked_visits: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// Fine-tunes readmission once per horizon.
    Horizon,
    /// Pretrains once per sum-loss weight and reports attention entropy.
    Lambda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub kind: SweepKind,
    pub lambdas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { kind: SweepKind::Horizon, lambdas: vec![0.0, 0.25, 1.0, 10.0] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every stage by [`RunConfig::resolve`].
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub task: TaskSection,
    pub explain: ExplainSection,
    pub sweep: SweepSection,
}

/// Sets `path` (dotted keys) in `table` to `value`, parsed as a TOML value
/// when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key `{path}` is malformed")));
    }
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override key `{path}`: `{k}` is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Missing(format!("config {} not found", p.display())),
                _ => Error::Io(e),
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Copies the master seed into every stage.
    pub fn resolve(mut self) -> Self {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.data.synthetic.seed = self.seed;
        self.explain.mask.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.k == 0 || m.n_heads == 0 || !m.k.is_multiple_of(m.n_heads) {
            return Err(Error::Config(format!("k={} must be a positive multiple of n_heads={}", m.k, m.n_heads)));
        }
        self.model.encoder().validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.data.synthetic.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.task()?;
        for &h in &self.task.horizons_days {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("horizon {h} must be positive")));
            }
        }
        if !(self.explain.threshold >= 0.0) {
            return Err(Error::Config("explain threshold must be non-negative".into()));
        }
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        Task::parse(&self.task.name)
    }

    /// Hash of the whole resolved config.
    pub fn hash(&self) -> Result<String> {
        canonical_hash(self)
    }

    /// Hash of the parts that fix the concept space and architecture: a
    /// task run is compatible with a pretraining checkpoint of the same
    /// family.
    pub fn family_hash(&self) -> Result<String> {
        canonical_hash(&(&self.model, &self.data, self.seed))
    }
}

/// Default data directory: the given flag if any, else `MEDKG_DATA_DIR`,
/// else `./data`.
pub fn data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("data"))
}

pub const DATA_DIR_ENV: &str = "MEDKG_DATA_DIR";
