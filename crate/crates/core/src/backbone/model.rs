//! Differentiable forward pass of the decoder over packed batches.

use super::sites::InjectionSites;
use super::weights::BackboneWeights;
use super::SiteId;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, NodeId, Segment, Tape};

/// Several sequences concatenated row-wise; attention never crosses segments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PackedBatch {
    pub inputs: Vec<u32>,
    pub positions: Vec<u32>,
    pub segments: Vec<Segment>,
    /// Next-token targets; empty for inference batches.
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

impl PackedBatch {
    /// Teacher-forced batch. `mask[i]` marks token `i` as part of the loss;
    /// position `i` predicts token `i + 1`.
    pub fn for_training(seqs: &[(&[u32], &[bool])], max_len: usize) -> Result<Self> {
        let mut b = PackedBatch::default();
        for (tokens, mask) in seqs {
            if tokens.len() != mask.len() {
                return Err(Error::Dimension(format!("{} tokens with {} mask entries", tokens.len(), mask.len())));
            }
            if tokens.len() < 2 {
                return Err(Error::Data("training sequence needs at least two tokens".into()));
            }
            let n = tokens.len() - 1;
            if n > max_len {
                return Err(Error::ContextOverflow { len: n, max: max_len });
            }
            b.segments.push(Segment { start: b.inputs.len(), len: n });
            b.inputs.extend_from_slice(&tokens[..n]);
            b.positions.extend(0..n as u32);
            b.targets.extend_from_slice(&tokens[1..]);
            b.mask.extend_from_slice(&mask[1..]);
        }
        Ok(b)
    }

    pub fn for_inference(seqs: &[&[u32]], max_len: usize) -> Result<Self> {
        let mut b = PackedBatch::default();
        for tokens in seqs {
            if tokens.len() > max_len {
                return Err(Error::ContextOverflow { len: tokens.len(), max: max_len });
            }
            b.segments.push(Segment { start: b.inputs.len(), len: tokens.len() });
            b.inputs.extend_from_slice(tokens);
            b.positions.extend(0..tokens.len() as u32);
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.inputs.len()
    }
}

/// Node handles produced by [`forward_tape`].
#[derive(Debug)]
pub struct TapeForward {
    pub logits: NodeId,
    /// Backbone tensors in [`BackboneWeights::named`] order.
    pub backbone: Vec<NodeId>,
    /// `(A, B)` of each trainable adapter in [`InjectionSites::trainable`] order.
    pub adapters: Vec<(NodeId, NodeId)>,
}

fn project(
    tape: &mut Tape,
    h: NodeId,
    w: NodeId,
    site: SiteId,
    sites: &InjectionSites<'_>,
    trainable: &mut Vec<(NodeId, NodeId)>,
    frozen_merged: bool,
) -> Result<NodeId> {
    let mut z = tape.matmul_nt(h, w)?;
    for att in sites.at(site).iter().filter(|a| a.trainable || !frozen_merged) {
        let (a, b) = if att.trainable {
            let ids = (tape.param(att.adapter.a.clone()), tape.param(att.adapter.b.clone()));
            trainable.push(ids);
            ids
        } else {
            (tape.constant(att.adapter.a.clone()), tape.constant(att.adapter.b.clone()))
        };
        let ha = tape.matmul_nt(h, a)?;
        let delta = tape.matmul_nt(ha, b)?;
        z = tape.add(z, delta)?;
    }
    Ok(z)
}

fn frozen_constant(tape: &mut Tape, w: &Matrix, site: SiteId, sites: &InjectionSites<'_>, backbone: &mut Vec<NodeId>) -> NodeId {
    let mut m = w.clone();
    for att in sites.at(site).iter().filter(|a| !a.trainable) {
        m.add_assign(&att.adapter.delta());
    }
    let id = tape.constant(m);
    backbone.push(id);
    id
}

/// Records the full forward pass on `tape`. Backbone tensors become
/// trainable leaves only when `train_backbone` is set.
pub fn forward_tape(
    weights: &BackboneWeights,
    tape: &mut Tape,
    batch: &PackedBatch,
    sites: &InjectionSites<'_>,
    train_backbone: bool,
) -> Result<TapeForward> {
    let cfg = weights.config;
    let mut backbone = Vec::new();
    let reg = |tape: &mut Tape, m: &Matrix, backbone: &mut Vec<NodeId>| {
        let id = if train_backbone { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        backbone.push(id);
        id
    };
    if batch.positions.iter().any(|&p| p as usize >= cfg.max_seq_len) {
        return Err(Error::ContextOverflow { len: batch.positions.iter().max().map_or(0, |&p| p as usize + 1), max: cfg.max_seq_len });
    }

    let tok_emb = reg(tape, &weights.token_embedding, &mut backbone);
    let pos_emb = reg(tape, &weights.position_embedding, &mut backbone);
    let te = tape.gather(tok_emb, &batch.inputs)?;
    let pe = tape.gather(pos_emb, &batch.positions)?;
    let mut x = tape.add(te, pe)?;
    let mut trainable = Vec::new();

    for (li, layer) in weights.layers.iter().enumerate() {
        let ln1_g = reg(tape, &layer.ln1_gain, &mut backbone);
        let ln1_b = reg(tape, &layer.ln1_bias, &mut backbone);
        let q_site = SiteId { layer: li, kind: super::SiteKind::Query };
        let v_site = SiteId { layer: li, kind: super::SiteKind::Value };
        // With a frozen backbone, frozen adapters fold into the constant weight.
        let wq = if train_backbone { reg(tape, &layer.wq, &mut backbone) } else { frozen_constant(tape, &layer.wq, q_site, sites, &mut backbone) };
        let wk = reg(tape, &layer.wk, &mut backbone);
        let wv = if train_backbone { reg(tape, &layer.wv, &mut backbone) } else { frozen_constant(tape, &layer.wv, v_site, sites, &mut backbone) };
        let wo = reg(tape, &layer.wo, &mut backbone);
        let ln2_g = reg(tape, &layer.ln2_gain, &mut backbone);
        let ln2_b = reg(tape, &layer.ln2_bias, &mut backbone);
        let w_up = reg(tape, &layer.w_up, &mut backbone);
        let b_up = reg(tape, &layer.b_up, &mut backbone);
        let w_down = reg(tape, &layer.w_down, &mut backbone);
        let b_down = reg(tape, &layer.b_down, &mut backbone);

        let h = tape.layer_norm(x, ln1_g, ln1_b)?;
        let q = project(tape, h, wq, q_site, sites, &mut trainable, !train_backbone)?;
        let k = tape.matmul_nt(h, wk)?;
        let v = project(tape, h, wv, v_site, sites, &mut trainable, !train_backbone)?;
        let att = tape.causal_attention(q, k, v, &batch.segments, cfg.num_heads)?;
        let o = tape.matmul_nt(att, wo)?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, ln2_g, ln2_b)?;
        let up = tape.matmul_nt(h2, w_up)?;
        let up = tape.add_row(up, b_up)?;
        let act = tape.gelu(up);
        let down = tape.matmul_nt(act, w_down)?;
        let down = tape.add_row(down, b_down)?;
        x = tape.add(x, down)?;
    }
    let lnf_g = reg(tape, &weights.lnf_gain, &mut backbone);
    let lnf_b = reg(tape, &weights.lnf_bias, &mut backbone);
    let head = reg(tape, &weights.head, &mut backbone);
    let hf = tape.layer_norm(x, lnf_g, lnf_b)?;
    let logits = tape.matmul_nt(hf, head)?;
    Ok(TapeForward { logits, backbone, adapters: trainable })
}

/// Mean negative log-likelihood over the batch's masked target positions.
pub fn answer_loss(tape: &mut Tape, logits: NodeId, batch: &PackedBatch) -> Result<NodeId> {
    tape.masked_nll(logits, &batch.targets, &batch.mask)
}

/// Logits at every position of a single sequence.
pub fn forward(weights: &BackboneWeights, tokens: &[u32], sites: &InjectionSites<'_>) -> Result<Matrix> {
    let cfg = weights.config;
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::UnknownTokenId { id: bad, size: cfg.vocab_size });
    }
    let batch = PackedBatch::for_inference(&[tokens], cfg.max_seq_len)?;
    forward_batch(weights, &batch, sites)
}

/// Logits for every row of a packed batch.
pub fn forward_batch(weights: &BackboneWeights, batch: &PackedBatch, sites: &InjectionSites<'_>) -> Result<Matrix> {
    let mut tape = Tape::new();
    let out = forward_tape(weights, &mut tape, batch, sites, false)?;
    Ok(tape.value(out.logits).clone())
}
