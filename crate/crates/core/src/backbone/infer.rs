//! Inference-only forward pass with a per-sequence key/value cache.
//!
//! Adapter deltas are folded into temporary copies of the query and value
//! projections, so decoding costs the same with or without adapters. The
//! backbone itself is never touched.

use super::model::PackedBatch;
use super::sites::InjectionSites;
use super::weights::{BackboneConfig, BackboneWeights};
use super::{SiteId, SiteKind};
use crate::error::{Error, Result};
use crate::numeric::rng::derive_seed;
use crate::numeric::tape::{causal_attention_forward, gelu, layer_norm_forward, softmax_in_place};
use crate::numeric::{matmul_nt, Matrix, SeededRng, Segment};

#[derive(Clone, Debug)]
struct MergedLayer {
    ln1_gain: Vec<f64>,
    ln1_bias: Vec<f64>,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln2_gain: Vec<f64>,
    ln2_bias: Vec<f64>,
    w_up: Matrix,
    b_up: Vec<f64>,
    w_down: Matrix,
    b_down: Vec<f64>,
}

/// Immutable view of a backbone with a fixed adapter stack merged in.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    config: BackboneConfig,
    token_embedding: Matrix,
    position_embedding: Matrix,
    layers: Vec<MergedLayer>,
    lnf_gain: Vec<f64>,
    lnf_bias: Vec<f64>,
    head: Matrix,
}

fn merged(w: &Matrix, site: SiteId, sites: &InjectionSites<'_>) -> Matrix {
    let mut out = w.clone();
    for att in sites.at(site) {
        out.add_assign(&att.adapter.delta());
    }
    out
}

fn add_bias(x: &mut Matrix, bias: &[f64]) {
    for r in 0..x.rows() {
        for (v, b) in x.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

impl InferenceModel {
    pub fn new(weights: &BackboneWeights, sites: &InjectionSites<'_>) -> Self {
        let layers = weights
            .layers
            .iter()
            .enumerate()
            .map(|(layer, l)| MergedLayer {
                ln1_gain: l.ln1_gain.data().to_vec(),
                ln1_bias: l.ln1_bias.data().to_vec(),
                wq: merged(&l.wq, SiteId { layer, kind: SiteKind::Query }, sites),
                wk: l.wk.clone(),
                wv: merged(&l.wv, SiteId { layer, kind: SiteKind::Value }, sites),
                wo: l.wo.clone(),
                ln2_gain: l.ln2_gain.data().to_vec(),
                ln2_bias: l.ln2_bias.data().to_vec(),
                w_up: l.w_up.clone(),
                b_up: l.b_up.data().to_vec(),
                w_down: l.w_down.clone(),
                b_down: l.b_down.data().to_vec(),
            })
            .collect();
        Self {
            config: weights.config,
            token_embedding: weights.token_embedding.clone(),
            position_embedding: weights.position_embedding.clone(),
            layers,
            lnf_gain: weights.lnf_gain.data().to_vec(),
            lnf_bias: weights.lnf_bias.data().to_vec(),
            head: weights.head.clone(),
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&id) => Err(Error::UnknownTokenId { id, size: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    fn embed(&self, tokens: &[u32], positions: &[u32]) -> Matrix {
        let d = self.config.model_dim;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (r, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            let te = self.token_embedding.row(t as usize);
            let pe = self.position_embedding.row(p as usize);
            for ((o, a), b) in x.row_mut(r).iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
        x
    }

    fn mlp(&self, l: &MergedLayer, x: &mut Matrix) -> Result<()> {
        let (h, _, _) = layer_norm_forward(x, &l.ln2_gain, &l.ln2_bias);
        let mut up = matmul_nt(&h, &l.w_up)?;
        add_bias(&mut up, &l.b_up);
        up.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut down = matmul_nt(&up, &l.w_down)?;
        add_bias(&mut down, &l.b_down);
        x.add_assign(&down);
        Ok(())
    }

    fn head_logits(&self, x: &Matrix) -> Result<Matrix> {
        let (h, _, _) = layer_norm_forward(x, &self.lnf_gain, &self.lnf_bias);
        matmul_nt(&h, &self.head)
    }

    /// Full-sequence logits for every row of a packed batch.
    pub fn logits(&self, batch: &PackedBatch) -> Result<Matrix> {
        self.check_tokens(&batch.inputs)?;
        let mut x = self.embed(&batch.inputs, &batch.positions);
        for l in &self.layers {
            let (h, _, _) = layer_norm_forward(&x, &l.ln1_gain, &l.ln1_bias);
            let q = matmul_nt(&h, &l.wq)?;
            let k = matmul_nt(&h, &l.wk)?;
            let v = matmul_nt(&h, &l.wv)?;
            let (att, _) = causal_attention_forward(&q, &k, &v, &batch.segments, self.config.num_heads);
            x.add_assign(&matmul_nt(&att, &l.wo)?);
            self.mlp(l, &mut x)?;
        }
        self.head_logits(&x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    /// Zero or below selects greedy decoding.
    pub temperature: f64,
    /// Prompt `i` of a call samples from `derive_seed(seed, [i])`.
    pub seed: u64,
}

impl GenerateOptions {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { max_new_tokens, temperature: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Continuation without the end token.
    pub tokens: Vec<u32>,
    /// Stopped by the token budget or context length rather than by the end token.
    pub truncated: bool,
}

/// Keys and values of one sequence, per layer, row-major `len x d`.
struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn choose(logits: &[f64], temperature: f64, rng: &mut SeededRng) -> u32 {
    if temperature <= 0.0 {
        return argmax(logits) as u32;
    }
    let mut p: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut p);
    rng.categorical(&p) as u32
}

/// Attention of one new query row against a sequence's cached keys/values.
fn attend_one(q: &[f64], k: &[f64], v: &[f64], heads: usize, out: &mut [f64]) {
    let d = q.len();
    let dh = d / heads;
    let len = k.len() / d;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; len];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d][cols.clone()];
            *s = q[cols.clone()].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_in_place(&mut scores);
        let o = &mut out[cols.clone()];
        o.iter_mut().for_each(|x| *x = 0.0);
        for (j, &w) in scores.iter().enumerate() {
            let vj = &v[j * d..(j + 1) * d][cols.clone()];
            for (oc, vc) in o.iter_mut().zip(vj) {
                *oc += w * vc;
            }
        }
    }
}

/// Autoregressive decoding of many prompts at once, stopping each at the end
/// token, after `max_new_tokens`, or at the context limit.
pub fn generate(model: &InferenceModel, prompts: &[&[u32]], eos: u32, opts: &GenerateOptions) -> Result<Vec<Generation>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(prompts.len());
    for (c, chunk) in prompts.chunks(CHUNK).enumerate() {
        let rngs = (0..chunk.len())
            .map(|i| SeededRng::new(derive_seed(opts.seed, &[(c * CHUNK + i) as u64])))
            .collect();
        out.extend(generate_chunk(model, chunk, eos, opts, rngs)?);
    }
    Ok(out)
}

fn generate_chunk(
    model: &InferenceModel,
    prompts: &[&[u32]],
    eos: u32,
    opts: &GenerateOptions,
    mut rngs: Vec<SeededRng>,
) -> Result<Vec<Generation>> {
    let cfg = model.config;
    let d = cfg.model_dim;
    let mut results: Vec<Generation> =
        prompts.iter().map(|_| Generation { tokens: Vec::new(), truncated: false }).collect();
    if prompts.is_empty() {
        return Ok(results);
    }
    for p in prompts {
        if p.is_empty() {
            return Err(Error::Data("cannot generate from an empty prompt".into()));
        }
        model.check_tokens(p)?;
    }
    let batch = PackedBatch::for_inference(prompts, cfg.max_seq_len)?;
    if opts.max_new_tokens == 0 {
        return Ok(results);
    }

    // Prefill every prompt in one packed pass, capturing keys and values.
    let mut caches: Vec<KvCache> =
        prompts.iter().map(|_| KvCache { k: vec![Vec::new(); cfg.num_layers], v: vec![Vec::new(); cfg.num_layers] }).collect();
    let mut x = model.embed(&batch.inputs, &batch.positions);
    for (li, l) in model.layers.iter().enumerate() {
        let (h, _, _) = layer_norm_forward(&x, &l.ln1_gain, &l.ln1_bias);
        let q = matmul_nt(&h, &l.wq)?;
        let k = matmul_nt(&h, &l.wk)?;
        let v = matmul_nt(&h, &l.wv)?;
        for (seg, cache) in batch.segments.iter().zip(&mut caches) {
            cache.k[li].extend_from_slice(&k.data()[seg.start * d..(seg.start + seg.len) * d]);
            cache.v[li].extend_from_slice(&v.data()[seg.start * d..(seg.start + seg.len) * d]);
        }
        let (att, _) = causal_attention_forward(&q, &k, &v, &batch.segments, cfg.num_heads);
        x.add_assign(&matmul_nt(&att, &l.wo)?);
        model.mlp(l, &mut x)?;
    }
    let last: Vec<Matrix> = batch.segments.iter().map(|s| x.slice_rows(s.start + s.len - 1, 1)).collect();
    let mut logits = model.head_logits(&Matrix::vstack(&last)?)?;

    let mut active: Vec<usize> = (0..prompts.len()).collect();
    let mut lengths: Vec<usize> = batch.segments.iter().map(|s: &Segment| s.len).collect();
    loop {
        let mut next_active = Vec::new();
        let mut step_tokens = Vec::new();
        let mut step_positions = Vec::new();
        for (row, &s) in active.iter().enumerate() {
            let t = choose(logits.row(row), opts.temperature, &mut rngs[s]);
            if t == eos {
                continue;
            }
            let r = &mut results[s];
            r.tokens.push(t);
            if r.tokens.len() >= opts.max_new_tokens || lengths[s] >= cfg.max_seq_len {
                r.truncated = true;
                continue;
            }
            next_active.push(s);
            step_tokens.push(t);
            step_positions.push(lengths[s] as u32);
        }
        if next_active.is_empty() {
            return Ok(results);
        }
        active = next_active;

        let mut x = model.embed(&step_tokens, &step_positions);
        for (li, l) in model.layers.iter().enumerate() {
            let (h, _, _) = layer_norm_forward(&x, &l.ln1_gain, &l.ln1_bias);
            let q = matmul_nt(&h, &l.wq)?;
            let k = matmul_nt(&h, &l.wk)?;
            let v = matmul_nt(&h, &l.wv)?;
            let mut att = Matrix::zeros(active.len(), d);
            for (row, &s) in active.iter().enumerate() {
                let cache = &mut caches[s];
                cache.k[li].extend_from_slice(k.row(row));
                cache.v[li].extend_from_slice(v.row(row));
                attend_one(q.row(row), &cache.k[li], &cache.v[li], cfg.num_heads, att.row_mut(row));
            }
            x.add_assign(&matmul_nt(&att, &l.wo)?);
            model.mlp(l, &mut x)?;
        }
        for &s in &active {
            lengths[s] += 1;
        }
        logits = model.head_logits(&x)?;
    }
}
