//! Sentence-level IoU, BLEU and Rouge-L, plus the relative-drop statistic.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

use crate::error::{Error, Result};

/// `|pred ∩ truth| / |pred ∪ truth|`; an empty prediction scores 0.
pub fn iou<T: Ord>(pred: &BTreeSet<T>, truth: &BTreeSet<T>) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Evaluation("iou against an empty reference set".into()));
    }
    let inter = pred.intersection(truth).count();
    let union = pred.union(truth).count();
    Ok(inter as f64 / union as f64)
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total.
fn clipped<T: Eq + Hash>(pred: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let r = ngram_counts(reference, n);
    let matches = ngram_counts(pred, n).iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, pred.len().saturating_sub(n - 1))
}

fn bleu_from_stats(matches: &[usize; 4], totals: &[usize; 4], pred_len: usize, ref_len: usize) -> f64 {
    if pred_len == 0 {
        return 0.0;
    }
    let floor = 1.0 / (2.0 * pred_len as f64);
    let log_mean = (0..4)
        .map(|i| {
            let p = if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 };
            if p == 0.0 { floor } else { p }.ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if pred_len < ref_len { (1.0 - ref_len as f64 / pred_len as f64).exp() } else { 1.0 };
    100.0 * bp * log_mean.exp()
}

/// BLEU-4 with floor smoothing: a zero n-gram precision becomes `1 / (2·|pred|)`.
pub fn bleu<T: Eq + Hash>(pred: &[T], reference: &[T]) -> f64 {
    let mut matches = [0; 4];
    let mut totals = [0; 4];
    for n in 1..=4 {
        (matches[n - 1], totals[n - 1]) = clipped(pred, reference, n);
    }
    bleu_from_stats(&matches, &totals, pred.len(), reference.len())
}

/// Corpus-level BLEU: n-gram statistics and lengths are pooled before combining.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(&[T], &[T])]) -> f64 {
    let mut matches = [0; 4];
    let mut totals = [0; 4];
    let (mut pl, mut rl) = (0, 0);
    for (pred, reference) in pairs {
        for n in 1..=4 {
            let (m, t) = clipped(pred, reference, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
        pl += pred.len();
        rl += reference.len();
    }
    bleu_from_stats(&matches, &totals, pl, rl)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with β = 1, scaled to [0, 100].
pub fn rouge_l<T: Eq>(pred: &[T], reference: &[T]) -> f64 {
    let l = lcs_len(pred, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / pred.len() as f64;
    let r = l as f64 / reference.len() as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Percentage lost going from `before` to `after`.
pub fn relative_drop(before: f64, after: f64) -> Result<f64> {
    if !(before > 0.0) {
        return Err(Error::Evaluation(format!("relative drop from non-positive value {before}")));
    }
    Ok(100.0 * (before - after) / before)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&'static str]) -> BTreeSet<&'static str> {
        items.iter().copied().collect()
    }

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&set(&["a", "b"]), &set(&["a", "b"])).unwrap(), 1.0);
        assert_eq!(iou(&set(&["a"]), &set(&["b"])).unwrap(), 0.0);
        assert_eq!(iou(&set(&["a", "b", "c"]), &set(&["b", "c", "d"])).unwrap(), 0.5);
        assert_eq!(iou(&set(&[]), &set(&["b"])).unwrap(), 0.0);
        assert!(iou(&set(&["a"]), &set(&[])).is_err());
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu(&words("a b c d"), &words("a b c d")) - 100.0).abs() < 1e-12);
        assert_eq!(bleu::<&str>(&[], &words("a b")), 0.0);
        // p1 = p2 = p3 = 1, p4 has no candidate 4-grams and is floored to 1/6.
        let expected = 100.0 * (1.0f64 - 4.0 / 3.0).exp() * (1.0f64 / 6.0).powf(0.25);
        assert!((bleu(&words("a b c"), &words("a b c d")) - expected).abs() < 1e-9);
    }

    #[test]
    fn corpus_bleu_of_one_pair_is_sentence_bleu() {
        let (p, r) = (words("a b c x e"), words("a b c d e f"));
        assert!((corpus_bleu(&[(&p[..], &r[..])]) - bleu(&p, &r)).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge_l(&words("a b c"), &words("a b c")) - 100.0).abs() < 1e-12);
        assert_eq!(rouge_l(&words("x y"), &words("a b")), 0.0);
        assert!((rouge_l(&words("a x b"), &words("a b c")) - 200.0 / 3.0).abs() < 0.01);
        assert_eq!(rouge_l::<&str>(&[], &words("a")), 0.0);
    }

    #[test]
    fn drop_examples() {
        assert!((relative_drop(36.95, 12.73).unwrap() - 65.55).abs() < 0.01);
        assert_eq!(relative_drop(5.0, 5.0).unwrap(), 0.0);
        assert!((relative_drop(36.56, 35.24).unwrap() - 3.61).abs() < 0.01);
        assert!((relative_drop(38.54, 37.29).unwrap() - 3.24).abs() < 0.01);
        assert!(relative_drop(0.0, 1.0).is_err());
    }
}
