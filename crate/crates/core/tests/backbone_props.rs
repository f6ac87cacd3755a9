use foodcl_core::backbone::{
    answer_loss, forward, forward_tape, pretrain_backbone, BackboneConfig, BackboneWeights, InjectionSites, PackedBatch,
    PretrainConfig, SiteId, SiteKind,
};
use foodcl_core::lora::train::fresh_adapters;
use foodcl_core::lora::LoraAdapter;
use foodcl_core::numeric::{matmul, max_relative_error, numerical_gradient, Matrix, SeededRng, Tape};
use proptest::prelude::*;

fn tiny(seed: u64) -> BackboneWeights {
    let cfg = BackboneConfig { vocab_size: 11, model_dim: 8, num_layers: 2, num_heads: 2, mlp_dim: 12, max_seq_len: 12 };
    BackboneWeights::init(cfg, seed).unwrap()
}

fn with_random_b(mut adapters: Vec<LoraAdapter>, rng: &mut SeededRng, scale: f64) -> Vec<LoraAdapter> {
    for a in &mut adapters {
        a.b.data_mut().iter_mut().for_each(|x| *x = rng.uniform(-scale, scale));
    }
    adapters
}

fn logits_with(w: &BackboneWeights, tokens: &[u32], adapters: &[LoraAdapter]) -> Matrix {
    let mut sites = InjectionSites::empty(&w.config);
    sites.attach_all(adapters, false).unwrap();
    forward(w, tokens, &sites).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn later_tokens_never_change_earlier_logits(
        tokens in prop::collection::vec(0u32..11, 2..12),
        j in 0usize..11,
        seed in 0u64..1000,
    ) {
        let j = j % tokens.len();
        let w = tiny(seed);
        let mut rng = SeededRng::new(seed);
        let adapters = with_random_b(fresh_adapters(&w.config, 2, &mut rng).unwrap(), &mut rng, 0.3);
        let base = logits_with(&w, &tokens, &adapters);
        let mut changed = tokens.clone();
        changed[j] = (changed[j] + 1 + rng.below(10) as u32) % 11;
        let after = logits_with(&w, &changed, &adapters);
        for p in 0..j {
            prop_assert_eq!(base.row(p), after.row(p));
        }
    }

    #[test]
    fn zero_delta_adapters_are_bit_identical_to_none(tokens in prop::collection::vec(0u32..11, 1..12), seed in 0u64..1000) {
        let w = tiny(seed);
        let adapters = fresh_adapters(&w.config, 3, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(logits_with(&w, &tokens, &[]), logits_with(&w, &tokens, &adapters));
    }

    #[test]
    fn adapters_act_as_merged_weights(tokens in prop::collection::vec(0u32..11, 1..12), seed in 0u64..1000) {
        let w = tiny(seed);
        let mut rng = SeededRng::new(seed);
        let adapters = with_random_b(fresh_adapters(&w.config, 2, &mut rng).unwrap(), &mut rng, 0.5);
        let mut merged = w.clone();
        for a in &adapters {
            let layer = &mut merged.layers[a.site.layer];
            let target = if a.site.kind == SiteKind::Query { &mut layer.wq } else { &mut layer.wv };
            target.add_assign(&matmul(&a.b, &a.a).unwrap());
        }
        let adapted = logits_with(&w, &tokens, &adapters);
        let oracle = logits_with(&merged, &tokens, &[]);
        prop_assert!(max_relative_error(&adapted, &oracle) <= 1e-9);
    }
}

#[test]
fn answer_loss_gradients_match_differences_for_adapters() {
    let cfg = BackboneConfig { vocab_size: 9, model_dim: 8, num_layers: 1, num_heads: 2, mlp_dim: 8, max_seq_len: 8 };
    let w = BackboneWeights::init(cfg, 3).unwrap();
    let mut rng = SeededRng::new(4);
    let adapters = with_random_b(fresh_adapters(&cfg, 2, &mut rng).unwrap(), &mut rng, 0.4);
    let batch = PackedBatch::for_training(
        &[(&[1, 2, 3, 4, 5], &[false, false, true, true, true]), (&[6, 7, 8, 0], &[false, true, true, true])],
        8,
    )
    .unwrap();
    let loss_of = |adapters: &[LoraAdapter]| {
        let mut tape = Tape::new();
        let mut sites = InjectionSites::empty(&cfg);
        sites.attach_all(adapters, true).unwrap();
        let f = forward_tape(&w, &mut tape, &batch, &sites, false).unwrap();
        let loss = answer_loss(&mut tape, f.logits, &batch).unwrap();
        let grads = tape.backward(loss).unwrap();
        let order: Vec<SiteId> = sites.trainable().map(|a| a.site).collect();
        (tape.value(loss).item(), f.adapters.iter().map(|&(a, b)| (grads.get(a), grads.get(b))).collect::<Vec<_>>(), order)
    };
    let (_, grads, order) = loss_of(&adapters);
    for ((ga, gb), site) in grads.iter().zip(order) {
        let i = adapters.iter().position(|a| a.site == site).unwrap();
        for (which, analytic) in [(0, ga), (1, gb)] {
            let p = if which == 0 { &adapters[i].a } else { &adapters[i].b };
            let numeric = numerical_gradient(
                |m| {
                    let mut v = adapters.clone();
                    if which == 0 {
                        v[i].a = m.clone();
                    } else {
                        v[i].b = m.clone();
                    }
                    loss_of(&v).0
                },
                p,
                1e-5,
            );
            assert!(max_relative_error(analytic, &numeric) <= 1e-4, "{site} {which}");
        }
    }
}

#[test]
fn uniform_logits_cost_log_vocab() {
    let mut w = tiny(1);
    w.head = Matrix::zeros(w.head.rows(), w.head.cols());
    let batch = PackedBatch::for_training(&[(&[1, 2, 3, 4], &[true; 4])], 12).unwrap();
    let mut tape = Tape::new();
    let f = forward_tape(&w, &mut tape, &batch, &InjectionSites::empty(&w.config), false).unwrap();
    let loss = answer_loss(&mut tape, f.logits, &batch).unwrap();
    assert!((tape.value(loss).item() - (11f64).ln()).abs() < 1e-12);
}

#[test]
fn pretraining_overfits_a_tiny_corpus() {
    let cfg = BackboneConfig { vocab_size: 11, model_dim: 16, num_layers: 1, num_heads: 2, mlp_dim: 32, max_seq_len: 12 };
    let corpus: Vec<Vec<u32>> = (0..8).map(|i| (0..10).map(|j| ((i + 3 * j) % 11) as u32).collect()).collect();
    let params = PretrainConfig {
        max_steps: 400,
        batch_size: 8,
        learning_rate: 1e-2,
        warmup_steps: 10,
        eval_every: 1000,
        patience: 3,
        // Validation draws on the same tiny corpus.
        val_fraction: 0.0,
    };
    let (w, report) = pretrain_backbone(&corpus, cfg, &params, 5, |_, _, _| {}).unwrap();
    assert!(report.best_val_loss < 0.1, "loss {} after {} steps", report.best_val_loss, report.steps);
    let (again, _) = pretrain_backbone(&corpus, cfg, &params, 5, |_, _, _| {}).unwrap();
    assert_eq!(w.checksum(), again.checksum());
}

#[test]
fn checkpoint_round_trip_is_bit_exact_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.tensors");
    let w = tiny(9);
    w.save(&path).unwrap();
    let back = BackboneWeights::load(&path).unwrap();
    assert_eq!(back, w);
    assert_eq!(back.checksum(), w.checksum());
}
