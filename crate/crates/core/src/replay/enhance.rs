//! Threshold voting over set answers and embedding consensus over text answers.

use std::collections::{BTreeMap, BTreeSet};

use super::embed::Embedder;
use crate::error::{Error, Result};
use crate::numeric::cosine_similarity;

/// Keeps items found in at least `threshold` candidates (more than
/// `threshold` when `strict`). Confidence is the smallest vote fraction among
/// kept items, or 0 when nothing survives.
pub fn enhance_set(candidates: &[BTreeSet<String>], threshold: usize, strict: bool) -> Result<(BTreeSet<String>, f64)> {
    let n = candidates.len();
    if threshold == 0 || threshold > n {
        return Err(Error::Config(format!("vote threshold {threshold} outside 1..={n}")));
    }
    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
    for c in candidates {
        for item in c {
            *votes.entry(item.as_str()).or_insert(0) += 1;
        }
    }
    let keep = |v: usize| if strict { v > threshold } else { v >= threshold };
    let kept: BTreeSet<String> = votes.iter().filter(|(_, &v)| keep(v)).map(|(k, _)| k.to_string()).collect();
    let confidence = votes
        .iter()
        .filter(|(_, &v)| keep(v))
        .map(|(_, &v)| v as f64 / n as f64)
        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.min(x))))
        .unwrap_or(0.0);
    Ok((kept, confidence))
}

/// Picks the candidate with the highest mean cosine similarity to the other
/// candidates; ties (within 1e-12, so summation order cannot decide them)
/// go to the lowest index. Candidates that cannot be
/// embedded are left out of the matrix entirely.
pub fn consensus_select(candidates: &[&str], embedder: &dyn Embedder) -> Result<(usize, f64)> {
    match candidates.len() {
        0 => return Err(Error::Degenerate("consensus over zero candidates".into())),
        1 => return Ok((0, 1.0)),
        _ => {}
    }
    let embedded: Vec<(usize, Vec<f64>)> =
        candidates.iter().enumerate().filter_map(|(i, c)| embedder.embed(c).ok().map(|v| (i, v))).collect();
    if embedded.len() < 2 {
        return Err(Error::Degenerate(format!(
            "only {} of {} candidates could be embedded",
            embedded.len(),
            candidates.len()
        )));
    }
    let m = embedded.len();
    let mut sim = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let c = cosine_similarity(&embedded[i].1, &embedded[j].1)?;
            sim[i * m + j] = c;
            sim[j * m + i] = c;
        }
    }
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..m {
        let conf = (0..m).filter(|&j| j != i).map(|j| sim[i * m + j]).sum::<f64>() / (m - 1) as f64;
        if conf > best.1 + 1e-12 {
            best = (i, conf);
        }
    }
    Ok((embedded[best.0].0, best.1))
}
