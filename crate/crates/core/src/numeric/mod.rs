//! Numeric substrate: matrices, the gradient tape, AdamW and seeded randomness.

pub mod checkpoint;
pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod rng;
pub mod tape;

pub use gradcheck::{max_relative_error, numerical_gradient};
pub use matrix::{cosine_similarity, frobenius_sq, matmul, matmul_nt, Matrix};
pub use optim::{AdamW, AdamWConfig};
pub use rng::{derive_seed, SeededRng};
pub use tape::{Gradients, NodeId, Segment, Tape};

use sha2::{Digest, Sha256};

/// Hex SHA-256 over the shapes and bit patterns of a list of matrices.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Matrix>) -> String {
    let mut h = Sha256::new();
    for m in tensors {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
