use std::collections::BTreeSet;

use foodcl_core::replay::{consensus_select, embed_text, enhance_set, Embedder, HashedNgramEmbedder};
use proptest::prelude::*;

const WORDS: [&str; 10] = ["rice", "egg", "beef", "carrot", "boil", "fry", "chop", "salt", "bake", "mix"];

fn bundle() -> impl Strategy<Value = Vec<BTreeSet<String>>> {
    prop::collection::vec(prop::collection::btree_set(prop::sample::select(&WORDS[..]).prop_map(String::from), 0..6), 1..8)
}

fn texts() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::collection::vec(prop::sample::select(&WORDS[..]), 1..6).prop_map(|w| w.join(" ")),
        2..7,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn raising_the_threshold_never_adds_items(b in bundle(), t in 1usize..8, strict in any::<bool>()) {
        let t = 1 + (t - 1) % b.len();
        let lower = enhance_set(&b, t, strict).unwrap().0;
        for higher in t + 1..=b.len() {
            let h = enhance_set(&b, higher, strict).unwrap().0;
            prop_assert!(h.is_subset(&lower));
        }
    }

    #[test]
    fn candidate_order_does_not_matter(b in bundle(), t in 1usize..8, seed in any::<u64>()) {
        let t = 1 + (t - 1) % b.len();
        let mut shuffled = b.clone();
        foodcl_core::numeric::SeededRng::new(seed).shuffle(&mut shuffled);
        prop_assert_eq!(enhance_set(&b, t, false).unwrap(), enhance_set(&shuffled, t, false).unwrap());
    }

    #[test]
    fn set_confidence_is_a_vote_fraction(b in bundle(), t in 1usize..8) {
        let t = 1 + (t - 1) % b.len();
        let (kept, conf) = enhance_set(&b, t, false).unwrap();
        prop_assert!((0.0..=1.0).contains(&conf));
        if !kept.is_empty() {
            let min_votes = kept.iter().map(|x| b.iter().filter(|c| c.contains(x)).count()).min().unwrap();
            prop_assert!((conf - min_votes as f64 / b.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn consensus_confidence_ignores_order_of_the_others(t in texts(), seed in any::<u64>()) {
        let e = HashedNgramEmbedder::default();
        let refs: Vec<&str> = t.iter().map(String::as_str).collect();
        let (i, conf) = consensus_select(&refs, &e).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&conf));

        let mut others: Vec<&str> = refs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| *s).collect();
        foodcl_core::numeric::SeededRng::new(seed).shuffle(&mut others);
        let mut permuted = vec![refs[i]];
        permuted.extend(others);
        // Exact ties may pick another text, but always with the same score.
        let (_, conf2) = consensus_select(&permuted, &e).unwrap();
        prop_assert!((conf - conf2).abs() <= 1e-11);
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm(t in texts()) {
        for s in &t {
            let a = embed_text(s).unwrap();
            let b = HashedNgramEmbedder::default().embed(s).unwrap();
            prop_assert_eq!(&a, &b);
            let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
