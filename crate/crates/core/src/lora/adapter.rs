//! Low-rank adapter pairs.

use serde::{Deserialize, Serialize};

use crate::backbone::SiteId;
use crate::error::{Error, Result};
use crate::numeric::{matmul, Matrix, SeededRng};

/// `delta W = B A` with `A: r x k` and `B: d x r` at one injection site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub site: SiteId,
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraAdapter {
    /// Fresh adapter: `B = 0`, `A` uniform in `+-1/sqrt(k)`.
    pub fn new(site: SiteId, out_dim: usize, in_dim: usize, rank: usize, rng: &mut SeededRng) -> Result<Self> {
        if rank == 0 || rank > out_dim.min(in_dim) {
            return Err(Error::Config(format!("rank {rank} must lie in 1..={}", out_dim.min(in_dim))));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data = (0..rank * in_dim).map(|_| rng.uniform(-bound, bound)).collect();
        Ok(Self { site, a: Matrix::from_vec(rank, in_dim, data)?, b: Matrix::zeros(out_dim, rank) })
    }

    pub fn from_parts(site: SiteId, a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::Dimension(format!("A {:?} and B {:?} disagree on rank", a.shape(), b.shape())));
        }
        if a.rows() == 0 || a.rows() > a.cols().min(b.rows()) {
            return Err(Error::Config(format!("rank {} exceeds min(d, k) for A {:?}, B {:?}", a.rows(), a.shape(), b.shape())));
        }
        Ok(Self { site, a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// The dense update `B A` (`d x k`).
    pub fn delta(&self) -> Matrix {
        matmul(&self.b, &self.a).expect("rank-consistent")
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::SiteKind;

    const SITE: SiteId = SiteId { layer: 0, kind: SiteKind::Query };

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let mut rng = SeededRng::new(1);
        let a = LoraAdapter::new(SITE, 8, 6, 2, &mut rng).unwrap();
        assert_eq!(a.a.shape(), (2, 6));
        assert_eq!(a.b.shape(), (8, 2));
        assert!(a.delta().is_zero());
        assert!(!a.a.is_zero());
        assert!(a.a.data().iter().all(|v| v.abs() <= 1.0 / 6f64.sqrt()));
    }

    #[test]
    fn rank_bounds() {
        let mut rng = SeededRng::new(1);
        assert!(LoraAdapter::new(SITE, 4, 6, 5, &mut rng).is_err());
        assert!(LoraAdapter::new(SITE, 4, 6, 0, &mut rng).is_err());
        assert!(LoraAdapter::new(SITE, 4, 6, 4, &mut rng).is_ok());
        assert!(LoraAdapter::from_parts(SITE, Matrix::zeros(2, 3), Matrix::zeros(3, 3)).is_err());
    }
}
