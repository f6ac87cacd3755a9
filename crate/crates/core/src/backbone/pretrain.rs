//! Next-token pretraining of the backbone on an untasked corpus.

use serde::{Deserialize, Serialize};

use super::model::{answer_loss, forward_tape, PackedBatch};
use super::sites::InjectionSites;
use super::weights::{BackboneConfig, BackboneWeights};
use crate::error::{Error, Result};
use crate::numeric::{AdamW, AdamWConfig, SeededRng, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Validation loss is checked this often; training stops after
    /// `patience` checks without improvement.
    pub eval_every: usize,
    pub patience: usize,
    pub val_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 3000,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_steps: 100,
            eval_every: 250,
            patience: 3,
            val_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
    pub stopped_early: bool,
}

fn full_mask(seq: &[u32]) -> Vec<bool> {
    vec![true; seq.len()]
}

fn mean_loss(weights: &BackboneWeights, seqs: &[&Vec<u32>], batch_size: usize) -> Result<f64> {
    let sites = InjectionSites::empty(&weights.config);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(batch_size.max(1)) {
        let masks: Vec<Vec<bool>> = chunk.iter().map(|s| full_mask(s)).collect();
        let pairs: Vec<(&[u32], &[bool])> = chunk.iter().zip(&masks).map(|(s, m)| (s.as_slice(), m.as_slice())).collect();
        let batch = PackedBatch::for_training(&pairs, weights.config.max_seq_len)?;
        let mut tape = Tape::new();
        let f = forward_tape(weights, &mut tape, &batch, &sites, false)?;
        let loss = answer_loss(&mut tape, f.logits, &batch)?;
        let n = batch.mask.iter().filter(|&&m| m).count();
        total += tape.value(loss).item() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn schedule(step: usize, cfg: &PretrainConfig) -> f64 {
    let warm = cfg.warmup_steps.max(1);
    if step < warm {
        return cfg.learning_rate * (step + 1) as f64 / warm as f64;
    }
    let progress = (step - warm) as f64 / (cfg.max_steps.saturating_sub(warm)).max(1) as f64;
    let floor = 0.1 * cfg.learning_rate;
    floor + 0.5 * (cfg.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Trains fresh weights by full-sequence next-token cross-entropy until the
/// validation loss plateaus or the step budget runs out. `progress` receives
/// `(step, train_loss, val_loss)` at every validation check.
pub fn pretrain_backbone(
    corpus: &[Vec<u32>],
    config: BackboneConfig,
    params: &PretrainConfig,
    seed: u64,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<(BackboneWeights, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    if params.batch_size == 0 || params.max_steps == 0 {
        return Err(Error::Config("pretraining needs a positive batch size and step budget".into()));
    }
    if let Some(s) = corpus.iter().find(|s| s.len() < 2 || s.len() - 1 > config.max_seq_len) {
        return Err(Error::Data(format!("corpus sequence of length {} does not fit the context", s.len())));
    }
    let mut weights = BackboneWeights::init(config, seed)?;
    let mut rng = SeededRng::new(seed).fork("pretrain");

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut order);
    let n_val = ((corpus.len() as f64 * params.val_fraction) as usize).min(corpus.len() / 2);
    // Tiny corpora validate on the training set itself.
    let (val_idx, train_idx) = if n_val == 0 { (&order[..], &order[..]) } else { order.split_at(n_val) };
    let val: Vec<&Vec<u32>> = val_idx.iter().map(|&i| &corpus[i]).collect();

    let shapes: Vec<(usize, usize)> = weights.named().iter().map(|(_, m)| m.shape()).collect();
    let mut opt = AdamW::new(AdamWConfig { learning_rate: params.learning_rate, ..AdamWConfig::default() }, &shapes);
    let sites = InjectionSites::empty(&config);

    let initial_val_loss = mean_loss(&weights, &val, params.batch_size)?;
    let mut best = initial_val_loss;
    let mut best_weights = weights.clone();
    let mut stale = 0;
    let mut last_train = f64::NAN;
    let mut stopped_early = false;
    let mut steps = 0;

    for step in 0..params.max_steps {
        let idx: Vec<usize> = (0..params.batch_size).map(|_| train_idx[rng.below(train_idx.len())]).collect();
        let masks: Vec<Vec<bool>> = idx.iter().map(|&i| full_mask(&corpus[i])).collect();
        let pairs: Vec<(&[u32], &[bool])> =
            idx.iter().zip(&masks).map(|(&i, m)| (corpus[i].as_slice(), m.as_slice())).collect();
        let batch = PackedBatch::for_training(&pairs, config.max_seq_len)?;

        let mut tape = Tape::new();
        let f = forward_tape(&weights, &mut tape, &batch, &sites, true)?;
        let loss = answer_loss(&mut tape, f.logits, &batch)?;
        last_train = tape.value(loss).item();
        if !last_train.is_finite() {
            return Err(Error::Diverged(format!("pretraining loss {last_train} at step {step}")));
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<_> = f.backbone.iter().map(|&id| grads.take(id)).collect();
        drop(tape);
        opt.set_learning_rate(schedule(step, params));
        opt.step(&mut weights.tensors_mut(), &grads)?;
        steps = step + 1;

        if params.eval_every > 0 && steps % params.eval_every == 0 {
            let v = mean_loss(&weights, &val, params.batch_size)?;
            progress(steps, last_train, v);
            if v < best - 1e-4 {
                best = v;
                best_weights = weights.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= params.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let v = mean_loss(&weights, &val, params.batch_size)?;
    if v < best {
        best = v;
        best_weights = weights;
    }
    Ok((best_weights, PretrainReport { steps, initial_val_loss, best_val_loss: best, final_train_loss: last_train, stopped_early }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = PretrainConfig { max_steps: 100, warmup_steps: 10, learning_rate: 1.0, ..Default::default() };
        assert!(schedule(0, &cfg) < schedule(9, &cfg));
        assert!((schedule(9, &cfg) - 1.0).abs() < 1e-12);
        assert!(schedule(50, &cfg) < 1.0);
        assert!((schedule(100, &cfg) - 0.1).abs() < 1e-12);
    }
}
