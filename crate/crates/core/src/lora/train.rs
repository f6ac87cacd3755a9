//! Adapter training loops: answer loss plus an optional orthogonality penalty.

use serde::{Deserialize, Serialize};

use super::adapter::LoraAdapter;
use super::ortho::{orthogonality_loss, orthogonality_loss_node};
use super::registry::CompositionPolicy;
use crate::backbone::{answer_loss, forward_tape, BackboneConfig, BackboneWeights, InjectionSites, PackedBatch, SiteId};
use crate::error::{Error, Result};
use crate::numeric::{checksum, AdamW, AdamWConfig, Matrix, NodeId, SeededRng, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualLoraHyper {
    pub rank: usize,
    pub lambda_o: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub policy: CompositionPolicy,
}

impl Default for DualLoraHyper {
    fn default() -> Self {
        Self {
            rank: 8,
            lambda_o: 0.5,
            learning_rate: 2e-4,
            epochs: 3,
            batch_size: 16,
            policy: CompositionPolicy::CoopPlusAllSpec,
        }
    }
}

impl DualLoraHyper {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.rank == 0 || self.rank > backbone.model_dim {
            return Err(Error::Config(format!("rank {} must lie in 1..={}", self.rank, backbone.model_dim)));
        }
        if !(self.lambda_o >= 0.0) || !self.lambda_o.is_finite() {
            return Err(Error::Config(format!("lambda_o {} must be finite and non-negative", self.lambda_o)));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("learning rate, epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// A teacher-forced sequence with its loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

/// One trainable adapter and the frozen `A` matrices it must stay orthogonal to.
#[derive(Clone, Debug)]
pub struct TrainSlot {
    pub adapter: LoraAdapter,
    pub targets: Vec<Matrix>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean answer loss over the epoch's batches.
    pub task_loss: f64,
    /// Summed penalty at the end of the epoch, before the `lambda_o` weight.
    pub ortho_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_ortho_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
}

impl TrainLog {
    pub fn final_ortho_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_ortho_loss, |e| e.ortho_loss)
    }

    pub fn final_task_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.task_loss)
    }
}

/// Summed penalty `Σ_slots Σ_targets ‖A Cᵀ‖²` without the weight.
pub fn total_ortho_loss(slots: &[TrainSlot]) -> Result<f64> {
    let mut total = 0.0;
    for s in slots {
        for c in &s.targets {
            total += orthogonality_loss(&s.adapter.a, c)?;
        }
    }
    Ok(total)
}

struct Recorded {
    loss: NodeId,
    task: NodeId,
    params: Vec<(NodeId, NodeId)>,
}

fn record(
    tape: &mut Tape,
    backbone: &BackboneWeights,
    frozen: &[&LoraAdapter],
    slots: &[TrainSlot],
    batch: &PackedBatch,
    lambda: f64,
) -> Result<Recorded> {
    let mut sites = InjectionSites::empty(&backbone.config);
    sites.attach_all(frozen.iter().copied(), false)?;
    sites.attach_all(slots.iter().map(|s| &s.adapter), true)?;
    let f = forward_tape(backbone, tape, batch, &sites, false)?;
    let task = answer_loss(tape, f.logits, batch)?;

    // `forward_tape` registers trainable adapters site by site; map them back to slots.
    let order: Vec<&LoraAdapter> = sites.trainable().collect();
    let mut params = vec![None; slots.len()];
    for (ids, adapter) in f.adapters.iter().zip(&order) {
        let slot = slots.iter().position(|s| std::ptr::eq(&s.adapter, *adapter)).expect("attached slot");
        params[slot] = Some(*ids);
    }
    let params: Vec<(NodeId, NodeId)> = params.into_iter().map(|p| p.expect("every slot attached")).collect();

    let mut ortho = None;
    for (slot, &(a, _)) in slots.iter().zip(&params) {
        for c in &slot.targets {
            let term = orthogonality_loss_node(tape, a, c)?;
            ortho = Some(match ortho {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let loss = match ortho {
        Some(o) if lambda != 0.0 => {
            let w = tape.scale(o, lambda);
            tape.add(task, w)?
        }
        _ => task,
    };
    Ok(Recorded { loss, task, params })
}

/// Value of answer loss plus `lambda` times the summed penalty of each slot
/// against its targets.
pub fn specialized_objective(
    backbone: &BackboneWeights,
    frozen: &[&LoraAdapter],
    slots: &[TrainSlot],
    batch: &PackedBatch,
    lambda: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let r = record(&mut tape, backbone, frozen, slots, batch, lambda)?;
    Ok(tape.value(r.loss).item())
}

/// Objective value and its gradient for each slot's `(A, B)`.
pub fn objective_gradients(
    backbone: &BackboneWeights,
    frozen: &[&LoraAdapter],
    slots: &[TrainSlot],
    batch: &PackedBatch,
    lambda: f64,
) -> Result<(f64, Vec<(Matrix, Matrix)>)> {
    let mut tape = Tape::new();
    let r = record(&mut tape, backbone, frozen, slots, batch, lambda)?;
    let mut g = tape.backward(r.loss)?;
    let grads = r.params.iter().map(|&(a, b)| (g.take(a), g.take(b))).collect();
    Ok((tape.value(r.loss).item(), grads))
}

/// Trains every slot's adapter jointly for `hyper.epochs` passes over
/// `data`; `frozen` adapters contribute to the forward pass but never change.
pub fn train_adapters(
    backbone: &BackboneWeights,
    frozen: &[&LoraAdapter],
    mut slots: Vec<TrainSlot>,
    data: &[Example],
    hyper: &DualLoraHyper,
    lambda: f64,
    seed: u64,
) -> Result<(Vec<LoraAdapter>, TrainLog)> {
    if data.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let frozen_before = checksum(frozen.iter().flat_map(|a| [&a.a, &a.b]));
    let backbone_before = backbone.checksum();
    let shapes: Vec<(usize, usize)> = slots.iter().flat_map(|s| [s.adapter.a.shape(), s.adapter.b.shape()]).collect();
    let mut opt = AdamW::new(AdamWConfig { learning_rate: hyper.learning_rate, ..AdamWConfig::default() }, &shapes);
    let mut rng = SeededRng::new(seed);
    let initial_ortho_loss = total_ortho_loss(&slots)?;
    let mut epochs = Vec::with_capacity(hyper.epochs);
    let max_len = backbone.config.max_seq_len;

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let pairs: Vec<(&[u32], &[bool])> =
                chunk.iter().map(|&i| (data[i].tokens.as_slice(), data[i].mask.as_slice())).collect();
            let batch = PackedBatch::for_training(&pairs, max_len)?;
            let mut tape = Tape::new();
            let r = record(&mut tape, backbone, frozen, &slots, &batch, lambda)?;
            let task = tape.value(r.task).item();
            let total = tape.value(r.loss).item();
            if !total.is_finite() {
                return Err(Error::Diverged(format!("loss {total} at epoch {epoch}")));
            }
            let mut g = tape.backward(r.loss)?;
            let grads: Vec<Matrix> = r.params.iter().flat_map(|&(a, b)| [g.take(a), g.take(b)]).collect();
            drop(tape);
            let mut params: Vec<&mut Matrix> = slots.iter_mut().flat_map(|s| [&mut s.adapter.a, &mut s.adapter.b]).collect();
            opt.step(&mut params, &grads)?;
            sum += task;
            batches += 1;
        }
        epochs.push(EpochLog { epoch, task_loss: sum / batches as f64, ortho_loss: total_ortho_loss(&slots)? });
    }

    if checksum(frozen.iter().flat_map(|a| [&a.a, &a.b])) != frozen_before {
        return Err(Error::Invariant("a frozen adapter changed during training".into()));
    }
    if backbone.checksum() != backbone_before {
        return Err(Error::Invariant("backbone weights changed during adapter training".into()));
    }
    let log = TrainLog { initial_ortho_loss, epochs, steps: opt.steps() };
    Ok((slots.into_iter().map(|s| s.adapter).collect(), log))
}

/// Fresh zero-`B` adapters on every site.
pub fn fresh_adapters(config: &BackboneConfig, rank: usize, rng: &mut SeededRng) -> Result<Vec<LoraAdapter>> {
    SiteId::all(config)
        .into_iter()
        .map(|site| LoraAdapter::new(site, config.model_dim, config.model_dim, rank, rng))
        .collect()
}
