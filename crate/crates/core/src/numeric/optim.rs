//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update. Gradients are validated before any parameter is touched.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != self.first[i].shape() {
                return Err(Error::Dimension(format!(
                    "optimizer tensor {i}: moments {:?}, param {:?}, grad {:?}",
                    self.first[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Diverged(format!("non-finite gradient in tensor {i} at step {}", self.step + 1)));
            }
        }
        self.step += 1;
        let AdamWConfig { learning_rate: lr, beta1, beta2, epsilon, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + epsilon);
                *pv = *pv * decay - lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &[(2, 2)]);
        let mut p = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let before = p.clone();
        for _ in 0..10 {
            opt.step(&mut [&mut p], &[Matrix::zeros(2, 2)]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        // Scalar simulation: every step must move strictly downhill.
        let mut opt = AdamW::new(AdamWConfig { learning_rate: 1e-2, ..Default::default() }, &[(1, 1)]);
        let mut p = Matrix::scalar(1.0);
        let mut prev = p.item();
        for _ in 0..200 {
            opt.step(&mut [&mut p], &[Matrix::scalar(0.3)]).unwrap();
            assert!(p.item() < prev);
            prev = p.item();
        }
    }

    #[test]
    fn weight_decay_shrinks_geometrically() {
        let cfg = AdamWConfig { learning_rate: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &[(1, 1)]);
        let mut p = Matrix::scalar(2.0);
        for step in 1..=5 {
            opt.step(&mut [&mut p], &[Matrix::zeros(1, 1)]).unwrap();
            let expected = 2.0 * (1.0f64 - 0.1 * 0.5).powi(step);
            assert!((p.item() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[(1, 2)]);
        let mut p = Matrix::row_vector(&[1.0, 2.0]);
        let err = opt.step(&mut [&mut p], &[Matrix::row_vector(&[0.0, f64::NAN])]).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)));
        assert_eq!(p, Matrix::row_vector(&[1.0, 2.0]));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[(1, 2)]);
        let mut p = Matrix::zeros(2, 1);
        assert!(opt.step(&mut [&mut p], &[Matrix::zeros(2, 1)]).is_err());
    }
}
