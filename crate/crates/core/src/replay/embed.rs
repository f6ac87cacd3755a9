//! Deterministic text embedder: hashed character trigrams and word unigrams.

use crate::error::{Error, Result};
use crate::numeric::matrix::l2_norm;
use crate::numeric::rng::label_tag;

pub trait Embedder {
    /// Unit-norm vector for `text`.
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashedNgramEmbedder {
    pub dim: usize,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl Embedder for HashedNgramEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        if words.is_empty() {
            return Err(Error::Degenerate("cannot embed empty text".into()));
        }
        let mut v = vec![0.0; self.dim];
        let mut bump = |key: &str| v[(label_tag(key) % self.dim as u64) as usize] += 1.0;
        for w in &words {
            bump(&format!("w:{w}"));
        }
        let padded: Vec<char> = format!(" {} ", words.join(" ")).chars().collect();
        for tri in padded.windows(3) {
            bump(&format!("c:{}", tri.iter().collect::<String>()));
        }
        let norm = l2_norm(&v);
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Embedding with the default 256-dimensional hashed embedder.
pub fn embed_text(text: &str) -> Result<Vec<f64>> {
    HashedNgramEmbedder::default().embed(text)
}
