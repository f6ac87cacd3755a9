//! Experiment configuration: TOML file, flag overrides and hashing.

use std::path::{Path, PathBuf};

use foodcl_core::backbone::{BackboneConfig, PretrainConfig};
use foodcl_core::foodstream::io::FORMAT_VERSION;
use foodcl_core::foodstream::{DatasetParams, Tokenizer};
use foodcl_core::lora::{DualLoraHyper, RunConfig, Strategy};
use foodcl_core::metrics::BleuMode;
use foodcl_core::replay::ReplayConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Output root used when neither a flag, the environment nor the file names one.
/// The `--out` flag wins over the environment, which wins over the file.
pub const DEFAULT_OUT: &str = "foodcl-out";
pub const OUT_ENV: &str = "FOODCL_OUT";

/// The shipped desk-scale profile.
pub const DESK_PROFILE: &str = include_str!("../../../configs/desk.toml");

/// Backbone shape; the vocabulary size always comes from the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneShape {
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for BackboneShape {
    fn default() -> Self {
        let r = BackboneConfig::reference(0);
        Self {
            model_dim: r.model_dim,
            num_layers: r.num_layers,
            num_heads: r.num_heads,
            mlp_dim: r.mlp_dim,
            max_seq_len: r.max_seq_len,
            init_seed: 1,
        }
    }
}

impl BackboneShape {
    pub fn config(&self, tok: &Tokenizer) -> BackboneConfig {
        BackboneConfig {
            vocab_size: tok.vocab_size(),
            model_dim: self.model_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            mlp_dim: self.mlp_dim,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub size: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self { size: 20_000, noise_level: 0.1, seed: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub max_new_tokens: usize,
    pub bleu_mode: BleuMode,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { max_new_tokens: 48, bleu_mode: BleuMode::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetParams,
    pub backbone: BackboneShape,
    pub corpus: CorpusParams,
    pub pretrain: PretrainConfig,
    pub method: Strategy,
    pub hyper: DualLoraHyper,
    pub replay: ReplayConfig,
    pub eval: EvalParams,
    pub seeds: Vec<u64>,
    /// Output root; not part of any hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetParams::default(),
            backbone: BackboneShape::default(),
            corpus: CorpusParams::default(),
            pretrain: PretrainConfig::default(),
            method: Strategy::default(),
            hyper: DualLoraHyper::default(),
            replay: ReplayConfig::default(),
            eval: EvalParams::default(),
            seeds: vec![1, 2, 3],
            out_dir: None,
        }
    }
}

fn sha256_json(value: &impl Serialize) -> Result<String> {
    // serde_json maps are ordered by key, so this is canonical.
    let text = serde_json::to_string(value)?;
    Ok(format!("{:x}", Sha256::digest(text.as_bytes())))
}

/// Short form of a hash used in directory names.
pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Parses a TOML scalar or array, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn desk() -> Self {
        Self::from_toml(DESK_PROFILE).expect("shipped profile parses")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies `section.key=value`; the value is read as TOML when it parses.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
        let mut root = toml::Value::try_from(&*self).map_err(|e| CliError::Config(e.to_string()))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut node = &mut root;
        for p in path {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*p))
                .ok_or_else(|| CliError::Config(format!("unknown config section {p:?} in {key:?}")))?;
        }
        let table = node.as_table_mut().ok_or_else(|| CliError::Config(format!("{key:?} does not name a field")))?;
        if !table.contains_key(*last) {
            return Err(CliError::Config(format!("unknown config key {key:?}")));
        }
        let mut value = parse_value(raw.trim());
        // `2` where a float lives means 2.0.
        if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (table.get(*last), &value) {
            value = toml::Value::Float(*i as f64);
        }
        table.insert(last.to_string(), value);
        *self = root.try_into().map_err(|e: toml::de::Error| CliError::Config(format!("override {key:?}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let tok = Tokenizer::new();
        self.dataset.validate()?;
        let bc = self.backbone.config(&tok);
        bc.validate()?;
        self.hyper.validate(&bc)?;
        self.replay.validate()?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("at least one evaluation seed is required".into()));
        }
        if self.corpus.size == 0 {
            return Err(CliError::Config("pretraining corpus size must be positive".into()));
        }
        Ok(())
    }

    pub fn out_root(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn dataset_hash(&self) -> Result<String> {
        let tok = Tokenizer::new();
        sha256_json(&serde_json::json!({
            "dataset": self.dataset,
            "format": FORMAT_VERSION,
            "vocab": tok.vocab_hash(),
        }))
    }

    pub fn backbone_hash(&self) -> Result<String> {
        let tok = Tokenizer::new();
        sha256_json(&serde_json::json!({
            "backbone": self.backbone,
            "corpus": self.corpus,
            "pretrain": self.pretrain,
            "vocab": tok.vocab_hash(),
        }))
    }

    /// Hash of everything that determines a run's results, seeds and output
    /// location excluded.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        c.seeds.clear();
        sha256_json(&c)
    }

    pub fn run_config(&self, seed: u64) -> Result<RunConfig> {
        Ok(RunConfig {
            strategy: self.method,
            hyper: self.hyper,
            replay: self.replay.clone(),
            seed,
            eval_max_new_tokens: self.eval.max_new_tokens,
            bleu_mode: self.eval.bleu_mode,
            config_hash: self.config_hash()?,
        })
    }
}
