use std::collections::BTreeSet;

use foodcl_core::foodstream::dataset::{answer_mask_from_markers, nutrition_of};
use foodcl_core::foodstream::{generate_dataset, load_stream, save_stream, DatasetParams, TaskKind, Tokenizer};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = DatasetParams> {
    (50usize..110, 0.0f64..0.5, any::<u64>()).prop_map(|(num_dishes, noise_level, seed)| DatasetParams {
        num_dishes,
        noise_level,
        seed,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_a_pure_function_of_its_parameters(p in params()) {
        let tok = Tokenizer::new();
        let (d1, s1) = generate_dataset(p, &tok).unwrap();
        let (d2, s2) = generate_dataset(p, &tok).unwrap();
        prop_assert_eq!(d1, d2);
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn splits_are_disjoint_and_in_stream_order(p in params()) {
        let tok = Tokenizer::new();
        let (_, s) = generate_dataset(p, &tok).unwrap();
        s.validate(&tok).unwrap();
        let kinds: Vec<TaskKind> = s.tasks.iter().map(|t| t.task).collect();
        prop_assert_eq!(kinds, TaskKind::STREAM.to_vec());
        for t in &s.tasks {
            let train: BTreeSet<u32> = t.train.iter().map(|x| x.dish_id).collect();
            let test: BTreeSet<u32> = t.test.iter().map(|x| x.dish_id).collect();
            prop_assert!(train.is_disjoint(&test));
        }
    }

    #[test]
    fn masks_cover_exactly_the_answers(p in params()) {
        let tok = Tokenizer::new();
        let (_, s) = generate_dataset(p, &tok).unwrap();
        for sample in s.tasks.iter().flat_map(|t| t.train.iter().chain(&t.test)) {
            let mask = sample.answer_mask();
            let tokens = sample.tokens();
            prop_assert_eq!(mask.iter().filter(|m| **m).count(), sample.answer.len());
            prop_assert!(mask[..sample.prompt.len()].iter().all(|m| !m));
            prop_assert_eq!(&answer_mask_from_markers(&tokens, &tok), &mask);
            let text = tok.decode(&tokens).unwrap();
            prop_assert_eq!(tok.encode(&text).unwrap(), tokens);
        }
    }

    #[test]
    fn nutrition_is_linear_in_the_ingredient_multiset(
        a in prop::collection::vec(0usize..20, 0..6),
        b in prop::collection::vec(0usize..20, 0..6),
    ) {
        let joint: Vec<usize> = a.iter().chain(&b).copied().collect();
        let (na, nb, nj) = (nutrition_of(&a), nutrition_of(&b), nutrition_of(&joint));
        prop_assert_eq!(nj.calories, na.calories + nb.calories);
        prop_assert_eq!(nj.fat, na.fat + nb.fat);
        prop_assert_eq!(nj.protein, na.protein + nb.protein);
    }
}

#[test]
fn stored_stream_loads_back_identically() {
    let tok = Tokenizer::new();
    let (_, s) = generate_dataset(DatasetParams { num_dishes: 50, noise_level: 0.2, seed: 3 }, &tok).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_stream(&s, dir.path(), &tok, Some("abc")).unwrap();
    assert_eq!(load_stream(dir.path(), &tok).unwrap(), s);
}
