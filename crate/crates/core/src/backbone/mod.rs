//! Tiny decoder-only transformer with adapter injection sites on every
//! query and value projection.

pub mod infer;
pub mod model;
pub mod pretrain;
pub mod sites;
pub mod weights;

pub use infer::{generate, GenerateOptions, Generation, InferenceModel};
pub use model::{answer_loss, forward, forward_batch, forward_tape, PackedBatch, TapeForward};
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainReport};
pub use sites::{Attached, InjectionSites, SiteId, SiteKind};
pub use weights::{BackboneConfig, BackboneWeights, LayerWeights};
