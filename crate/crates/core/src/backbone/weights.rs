//! Backbone configuration, parameters and checkpoint I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::checkpoint::TensorFile;
use crate::numeric::{checksum, Matrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
}

impl BackboneConfig {
    /// Reference desk-scale shape for a given vocabulary.
    pub fn reference(vocab_size: usize) -> Self {
        Self { vocab_size, model_dim: 64, num_layers: 2, num_heads: 4, mlp_dim: 128, max_seq_len: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.vocab_size == 0 || self.num_layers == 0 || self.mlp_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(format!("degenerate backbone shape {self:?}")));
        }
        Ok(())
    }

    /// Number of query/value injection sites.
    pub fn num_sites(&self) -> usize {
        self.num_layers * 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    /// Projections are stored `out x in`.
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w_up: Matrix,
    pub b_up: Matrix,
    pub w_down: Matrix,
    pub b_down: Matrix,
}

/// Frozen parameters of the decoder-only language model.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    pub head: Matrix,
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

impl BackboneWeights {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let d = config.model_dim;
        let std = 0.02;
        let resid_std = std / (2.0 * config.num_layers as f64).sqrt();
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                ln1_gain: Matrix::filled(1, d, 1.0),
                ln1_bias: Matrix::zeros(1, d),
                wq: normal(d, d, std, &mut rng),
                wk: normal(d, d, std, &mut rng),
                wv: normal(d, d, std, &mut rng),
                wo: normal(d, d, resid_std, &mut rng),
                ln2_gain: Matrix::filled(1, d, 1.0),
                ln2_bias: Matrix::zeros(1, d),
                w_up: normal(config.mlp_dim, d, std, &mut rng),
                b_up: Matrix::zeros(1, config.mlp_dim),
                w_down: normal(d, config.mlp_dim, resid_std, &mut rng),
                b_down: Matrix::zeros(1, d),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding: normal(config.vocab_size, d, std, &mut rng),
            position_embedding: normal(config.max_seq_len, d, std, &mut rng),
            layers,
            lnf_gain: Matrix::filled(1, d, 1.0),
            lnf_bias: Matrix::zeros(1, d),
            head: normal(config.vocab_size, d, std, &mut rng),
        })
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> =
            vec![("token_embedding".into(), &self.token_embedding), ("position_embedding".into(), &self.position_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("w_up", &l.w_up),
                ("b_up", &l.b_up),
                ("w_down", &l.w_down),
                ("b_down", &l.b_down),
            ] {
                out.push((format!("layer{i}.{name}"), m));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable views in the same order as [`BackboneWeights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w_up,
                &mut l.b_up,
                &mut l.w_down,
                &mut l.b_down,
            ]);
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.head]);
        out
    }

    /// SHA-256 over all parameters; the frozen-backbone invariant compares these.
    pub fn checksum(&self) -> String {
        checksum(self.named().into_iter().map(|(_, m)| m))
    }

    pub fn to_file(&self) -> TensorFile {
        let header = serde_json::json!({ "kind": "backbone", "config": self.config });
        let mut f = TensorFile::new(header);
        for (name, m) in self.named() {
            f.push(name, m.clone());
        }
        f
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        if file.header.get("kind").and_then(|k| k.as_str()) != Some("backbone") {
            return Err(Error::Format("not a backbone checkpoint".into()));
        }
        let config: BackboneConfig = serde_json::from_value(file.header["config"].clone())?;
        let mut w = BackboneWeights::init(config, 0)?;
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(w.tensors_mut()) {
            let m = file.get(name)?;
            if m.shape() != slot.shape() {
                return Err(Error::Format(format!("{name}: stored {:?}, expected {:?}", m.shape(), slot.shape())));
            }
            *slot = m.clone();
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&TensorFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig { vocab_size: 11, model_dim: 8, num_layers: 2, num_heads: 2, mlp_dim: 12, max_seq_len: 16 }
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig { num_heads: 3, ..tiny() }.validate().is_err());
        assert!(BackboneConfig::reference(203).validate().is_ok());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let w = BackboneWeights::init(tiny(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        w.save(&path).unwrap();
        let back = BackboneWeights::load(&path).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.checksum(), w.checksum());
        back.save(&dir.path().join("c.ckpt")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("c.ckpt")).unwrap());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(BackboneWeights::init(tiny(), 1).unwrap(), BackboneWeights::init(tiny(), 1).unwrap());
        assert_ne!(BackboneWeights::init(tiny(), 1).unwrap().checksum(), BackboneWeights::init(tiny(), 2).unwrap().checksum());
    }
}
