use enct5_core::model::{
    count_parameters, example_logits, forward, predict_class, ModelConfig, ParamCount, ParameterStore, TaskKind,
    Variant,
};
use enct5_core::packing::{pack_seq2seq, pack_slots, pack_with, Layout, SlotTarget};
use enct5_core::tensor::{Graph, Rng};
use enct5_core::Error;
use proptest::prelude::*;

fn small(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::desk(40);
    c.d_model = 16;
    c.d_ff = 24;
    c.d_kv = 4;
    c.rel_buckets = 8;
    c.rel_max_distance = 16;
    c.with_variant(variant, 3, TaskKind::Classification)
}

fn random_seqs(rng: &mut Rng, n: usize, lo: usize, hi: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let len = lo + rng.below((hi - lo + 1) as u64) as usize;
            (0..len).map(|_| 1 + rng.below(vocab as u64 - 1) as u32).collect()
        })
        .collect()
}

#[test]
fn encoder_output_shape_and_zero_layer_encoder() {
    let mut cfg = small(Variant::EncT5);
    let store = ParameterStore::init(&cfg, 1);
    let packed = pack_with(&[vec![3, 4, 5]], 6, Layout::Unpacked).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = forward(&mut g, &cfg, &p, &packed.batch).unwrap();
    assert_eq!(g.shape(out.encoder.hidden), [1, 6, 16]);
    assert_eq!(g.shape(out.logits), [1, 1, 4]);

    cfg.num_encoder_layers = 0;
    let store = ParameterStore::init(&cfg, 1);
    assert!(!store.names().any(|n| n.starts_with("encoder/layer")));
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = forward(&mut g, &cfg, &p, &packed.batch).unwrap();
    let h = g.value(out.encoder.hidden);
    let emb = store.get("embedding").unwrap();
    for (pos, &tok) in [3usize, 4, 5].iter().enumerate() {
        let row = &emb.data()[tok * 16..][..16];
        let rms = (row.iter().map(|x| x * x).sum::<f64>() / 16.0 + cfg.norm_eps).sqrt();
        for k in 0..16 {
            assert!((h.data()[pos * 16 + k] - row[k] / rms).abs() < 1e-12);
        }
    }
}

#[test]
fn out_of_range_token_is_rejected() {
    let cfg = small(Variant::T5);
    let store = ParameterStore::init(&cfg, 1);
    let packed = pack_seq2seq(&[vec![3, 99]], &[vec![2]], 4, 2, Layout::Packed).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    assert!(matches!(
        forward(&mut g, &cfg, &p, &packed.batch),
        Err(Error::TokenOutOfRange { id: 99, vocab: 40 })
    ));
}

#[test]
fn decoder_logits_shape_and_no_vocab_bias() {
    let cfg = small(Variant::T5);
    let store = ParameterStore::init(&cfg, 3);
    assert!(store.contains("decoder/lm_head"));
    assert!(!store.names().any(|n| n.contains("lm_head") && n.contains("bias")));
    let packed = pack_seq2seq(
        &[vec![3, 4], vec![5]],
        &[vec![6, 1], vec![7, 8, 1]],
        4,
        5,
        Layout::Packed,
    )
    .unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = forward(&mut g, &cfg, &p, &packed.batch).unwrap();
    assert_eq!(g.shape(out.logits), [1, 5, 40]);
}

#[test]
fn single_target_token_self_attention_is_identity() {
    for variant in [Variant::T5, Variant::OneDecT5] {
        let cfg = small(variant);
        let store = ParameterStore::init(&cfg, 11);
        let packed = pack_seq2seq(&[vec![3, 4, 5]], &[vec![9]], 3, 1, Layout::Packed).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let out = forward(&mut g, &cfg, &p, &packed.batch).unwrap();
        let dec = out.decoder.unwrap();
        assert_eq!(dec.self_attn_probs.len(), cfg.decoder_layers());
        for probs in dec.self_attn_probs {
            assert_eq!(g.shape(probs), [1, 4, 1, 1]);
            assert!(g.value(probs).data().iter().all(|&x| x == 1.0));
        }
    }
}

#[test]
fn enct5_head_width_matches_classes() {
    let cfg = small(Variant::EncT5).with_variant(Variant::EncT5, 3, TaskKind::Classification);
    assert_eq!(cfg.head_width(), 4);
    let store = ParameterStore::init(&cfg, 2);
    assert_eq!(store.get("head/projection_kernel").unwrap().shape(), [16, 4]);
    assert_eq!(store.get("head/projection_bias").unwrap().shape(), [4]);
    assert!(!store.names().any(|n| n.starts_with("head/") && n.contains("self_attn")));
    assert!(!store.names().any(|n| n.starts_with("decoder/")));
}

#[test]
fn enct5_slot_overflow_is_an_error() {
    let cfg = small(Variant::EncT5);
    let store = ParameterStore::init(&cfg, 2);
    let targets = [SlotTarget::Class(1), SlotTarget::Class(2)];
    let mut packed = pack_slots(&[vec![3], vec![4]], &targets, 4, None, Layout::Packed).unwrap();
    packed.batch.slots.as_mut().unwrap().max_segments = 1;
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    assert!(matches!(
        forward(&mut g, &cfg, &p, &packed.batch),
        Err(Error::TooManySegments { count: 2, max: 1, .. })
    ));
}

#[test]
fn packed_matches_unpacked_for_every_variant() {
    let mut rng = Rng::new(5);
    for variant in [Variant::T5, Variant::OneDecT5, Variant::EncT5] {
        let cfg = small(variant);
        for trial in 0..3 {
            let store = ParameterStore::init(&cfg, 100 + trial);
            let inputs = random_seqs(&mut rng, 5, 1, 6, cfg.vocab_size);
            let (a, b) = if variant == Variant::EncT5 {
                let t: Vec<_> = (0..5).map(|i| SlotTarget::Class(1 + i % 3)).collect();
                (
                    pack_slots(&inputs, &t, 12, None, Layout::Packed).unwrap(),
                    pack_slots(&inputs, &t, 12, None, Layout::Unpacked).unwrap(),
                )
            } else {
                let targets = random_seqs(&mut rng, 5, 1, 3, cfg.vocab_size);
                (
                    pack_seq2seq(&inputs, &targets, 12, 6, Layout::Packed).unwrap(),
                    pack_seq2seq(&inputs, &targets, 12, 6, Layout::Unpacked).unwrap(),
                )
            };
            assert!(a.batch.rows < b.batch.rows);
            let la = example_logits(&cfg, &store, &a).unwrap();
            let lb = example_logits(&cfg, &store, &b).unwrap();
            for (x, y) in la.iter().zip(&lb) {
                assert_eq!(x.shape(), y.shape());
                assert!(x.max_abs_diff(y) < 1e-9, "{variant}: {}", x.max_abs_diff(y));
            }
        }
    }
}

#[test]
fn enct5_is_equivariant_to_example_order() {
    let cfg = small(Variant::EncT5);
    let store = ParameterStore::init(&cfg, 9);
    let inputs = vec![vec![3, 4, 5], vec![6, 7], vec![8, 9, 10, 11]];
    let t = vec![SlotTarget::Class(1); 3];
    let fwd = example_logits(
        &cfg,
        &store,
        &pack_slots(&inputs, &t, 16, None, Layout::Packed).unwrap(),
    )
    .unwrap();
    let perm = [2usize, 0, 1];
    let permuted: Vec<_> = perm.iter().map(|&i| inputs[i].clone()).collect();
    let rev = example_logits(
        &cfg,
        &store,
        &pack_slots(&permuted, &t, 16, None, Layout::Packed).unwrap(),
    )
    .unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert!(rev[k].max_abs_diff(&fwd[i]) < 1e-12);
    }
}

#[test]
fn same_seed_heads_are_bitwise_identical() {
    let cfg = small(Variant::EncT5);
    let a = ParameterStore::init(&cfg, 77);
    let b = ParameterStore::init(&cfg, 77);
    for name in ["head/bos_embedding", "head/projection_kernel", "head/projection_bias"] {
        assert!(a.get(name).unwrap().bit_eq(b.get(name).unwrap()));
    }
    assert!(!a.bit_eq(&ParameterStore::init(&cfg, 78)));
}

#[test]
fn enct5_is_smaller_when_decoder_is_at_least_as_deep() {
    for (l_enc, l_dec, d, v) in [(1, 1, 32, 64), (2, 3, 32, 200), (2, 2, 16, 128), (3, 3, 64, 700)] {
        let mut c = ModelConfig::desk(v);
        c.d_model = d;
        c.d_ff = 2 * d;
        c.d_kv = d / 4;
        c.num_encoder_layers = l_enc;
        c.num_decoder_layers = l_dec;
        assert!(v <= 4 * d * l_enc);
        let t5 = count_parameters(&c).total();
        let enc = count_parameters(&c.with_variant(Variant::EncT5, 2, TaskKind::Classification)).total();
        assert!(enc < t5, "{l_enc}/{l_dec}/{d}/{v}");
    }
}

#[test]
fn closed_form_matches_enumeration_for_all_variants() {
    for variant in [Variant::T5, Variant::OneDecT5, Variant::EncT5] {
        for kind in [TaskKind::Classification, TaskKind::Regression] {
            let c = ModelConfig::desk(97).with_variant(variant, 5, kind);
            assert_eq!(ParamCount::enumerate(&c), ParamCount::closed_form(&c));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predict_class_is_argmax_of_real_classes(logits in prop::collection::vec(-5i32..5, 2..8)) {
        let row: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
        let mut best = 1;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        prop_assert_eq!(predict_class(&row), best);
    }
}
