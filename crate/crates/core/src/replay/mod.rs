//! Pseudo replay with threshold voting and embedding-consensus filtering.

pub mod buffer;
pub mod embed;
pub mod enhance;
pub mod parse;

pub use buffer::{
    allocate, build_replay_buffer, enhance_bundle, load_buffer, save_buffer, PseudoSample, ReplayConfig,
    SelectionRule,
};
pub use embed::{embed_text, Embedder, HashedNgramEmbedder};
pub use enhance::{consensus_select, enhance_set};
pub use parse::parse_set_answer;
