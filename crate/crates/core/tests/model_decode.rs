//! Forward pass consistency: cached decoding against full recomputation,
//! serialization round trips and draft derivation.

use proptest::prelude::*;
use speckv_lab::model::{
    decode_greedy, decode_step, derive_draft, forward_prefill, forward_prefill_with, read_model, write_model,
    DecodeOptions, DraftMode, HeadMask, LayerMask, LayerWeights, PrefillOptions,
};
use speckv_lab::tensor::{argmax, Tensor};
use speckv_lab::{Error, KVCache, Model, ModelConfig};

fn model(seed: u64, n_kv: usize, group: usize) -> Model {
    Model::init_random(ModelConfig::new(2, n_kv * group, n_kv, 4, 12, 20, 64, seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cached_decode_equals_recompute(
        seed in any::<u64>(),
        n_kv in 1usize..3,
        group in 1usize..3,
        prompt in prop::collection::vec(0u32..20, 1..20),
        extra in prop::collection::vec(0u32..20, 1..5),
    ) {
        let m = model(seed, n_kv, group);
        let trace = forward_prefill(&m, &prompt, PrefillOptions::default()).unwrap();
        let mut cache = KVCache::from_trace(&trace, m.config(), prompt.len()).unwrap();
        let mut seq = prompt.clone();
        for &t in &extra {
            let logits = decode_step(&m, &mut cache, t, seq.len(), None).unwrap();
            seq.push(t);
            let full = forward_prefill(&m, &seq, PrefillOptions::default()).unwrap();
            for (a, b) in logits.iter().zip(full.last_logits()) {
                prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn binary_round_trip(seed in any::<u64>(), n_kv in 1usize..3, group in 1usize..3) {
        let m = model(seed, n_kv, group);
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        prop_assert_eq!(read_model(&buf[..]).unwrap(), m);
    }
}

#[test]
fn attention_rows_are_causal_distributions() {
    let m = model(3, 2, 2);
    let t = forward_prefill(&m, &[1, 5, 7, 2, 9, 9], PrefillOptions { capture_attention: true }).unwrap();
    for layer in &t.layers {
        for head in layer.attention.as_ref().unwrap() {
            for q in 0..6 {
                let row = head.row(q);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[q + 1..].iter().all(|x| *x == 0.0));
            }
        }
    }
    assert_eq!(t.total_score_ops(), 2 * 4 * 21);
}

#[test]
fn truncated_and_noiseless_drafts() {
    let m = model(4, 1, 2);
    assert_eq!(derive_draft(&m, DraftMode::Noise { sigma: 0.0 }, 1).unwrap(), m);
    assert_eq!(derive_draft(&m, DraftMode::Identical, 1).unwrap(), m);
    let short = derive_draft(&m, DraftMode::Truncate { layers: 1 }, 0).unwrap();
    assert_eq!(short.config().n_layers, 1);
    assert_eq!(short.unembed(), m.unembed());
    let a = derive_draft(&m, DraftMode::Noise { sigma: 0.1 }, 7).unwrap();
    assert_eq!(a, derive_draft(&m, DraftMode::Noise { sigma: 0.1 }, 7).unwrap());
    assert_ne!(a, m);
    assert!(derive_draft(&m, DraftMode::Noise { sigma: f64::NAN }, 0).is_err());
    assert!(derive_draft(&m, DraftMode::Truncate { layers: 3 }, 0).is_err());
}

#[test]
fn input_errors() {
    let m = model(5, 1, 1);
    assert!(matches!(forward_prefill(&m, &[20], PrefillOptions::default()), Err(Error::TokenOutOfVocab { .. })));
    assert!(matches!(forward_prefill(&m, &[0; 65], PrefillOptions::default()), Err(Error::LengthOverflow { .. })));
    let mut buf = Vec::new();
    write_model(&m, &mut buf).unwrap();
    assert!(matches!(read_model(&buf[..buf.len() - 3]), Err(Error::Format(_)) | Err(Error::Io(_))));
    buf[0] ^= 0xff;
    assert!(matches!(read_model(&buf[..]), Err(Error::Format(_))));
}

/// Repeats each KV head's columns `group` times so every query head gets
/// its own copy.
fn widen(t: &Tensor, n_kv: usize, group: usize, dh: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|i| {
            (0..n_kv * group)
                .flat_map(|h| t.row(i)[(h / group) * dh..(h / group + 1) * dh].to_vec())
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn grouped_heads_equal_multi_head_with_shared_weights() {
    for seed in 0..10 {
        let gqa = model(seed, 2, 3);
        let c = gqa.config().clone();
        let layers: Vec<LayerWeights> = gqa
            .layers()
            .iter()
            .map(|l| LayerWeights {
                wk: widen(&l.wk, c.n_kv_heads, 3, c.d_head),
                wv: widen(&l.wv, c.n_kv_heads, 3, c.d_head),
                ..l.clone()
            })
            .collect();
        let mha_cfg = ModelConfig { n_kv_heads: c.n_heads, ..c };
        let mha = Model::from_parts(mha_cfg, gqa.embed().clone(), None, layers, gqa.final_norm().to_vec(), gqa.unembed().clone()).unwrap();
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3];
        let a = forward_prefill(&gqa, &tokens, PrefillOptions::default()).unwrap();
        let b = forward_prefill(&mha, &tokens, PrefillOptions::default()).unwrap();
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn greedy_decoding_is_step_invariant() {
    let m = model(21, 1, 2);
    let prompt = [1, 2, 3, 4, 5, 6];
    let trace = forward_prefill(&m, &prompt, PrefillOptions::default()).unwrap();
    let mut whole_cache = KVCache::from_trace(&trace, m.config(), prompt.len()).unwrap();
    let whole = decode_greedy(&m, &mut whole_cache, trace.last_logits(), prompt.len(), DecodeOptions::new(10, None), None).unwrap();

    let mut cache = KVCache::from_trace(&trace, m.config(), prompt.len()).unwrap();
    let mut out = decode_greedy(&m, &mut cache, trace.last_logits(), prompt.len(), DecodeOptions::new(5, None), None).unwrap();
    // feed the fifth token ourselves, then continue from its logits
    let pos = prompt.len() + 4;
    let logits = decode_step(&m, &mut cache, out[4], pos, None).unwrap();
    out.extend(decode_greedy(&m, &mut cache, &logits, pos + 1, DecodeOptions::new(5, None), None).unwrap());
    assert_eq!(out, whole);
    assert_eq!(whole[0] as usize, argmax(trace.last_logits()));
}

#[test]
fn decode_after_eviction_sees_only_kept_positions() {
    // with one layer, cached keys depend only on their own token, so a
    // masked prefill of the extended sequence is an exact oracle
    let m = Model::init_random(ModelConfig::new(1, 4, 2, 4, 12, 20, 64, 31)).unwrap();
    let prompt: Vec<u32> = (0..24).map(|i| (i * 7 % 20) as u32).collect();
    let n = prompt.len();
    let trace = forward_prefill(&m, &prompt, PrefillOptions::default()).unwrap();
    let mut cache = KVCache::from_trace(&trace, m.config(), n).unwrap();
    let kept: Vec<Vec<usize>> = vec![vec![0, 3, 4, 10, 17, 23], vec![1, 2, 9, 22, 23]];
    for (h, k) in kept.iter().enumerate() {
        cache.evict_keep(0, h, k).unwrap();
    }
    let logits = decode_step(&m, &mut cache, 7, n, None).unwrap();

    let mut seq = prompt.clone();
    seq.push(7);
    let mut mask = LayerMask {
        heads: kept
            .iter()
            .map(|k| {
                let mut vertical = vec![false; n + 1];
                k.iter().for_each(|&i| vertical[i] = true);
                HeadMask { vertical, n_slash: 1 }
            })
            .collect(),
    };
    let oracle = forward_prefill_with(&m, &seq, PrefillOptions::default(), Some(&mut mask)).unwrap();
    for (a, b) in logits.iter().zip(oracle.last_logits()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
