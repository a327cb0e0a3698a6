//! Vertical-slash masks: counted ops equal the allowed pairs, attention
//! stays inside the mask, and masks built during prefill reuse the scores
//! they were built from.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speckv_lab::model::{forward_prefill, PrefillOptions};
use speckv_lab::sparse_prefill::{build_pattern, sparse_prefill, HeadPattern, VerticalSlashPattern};
use speckv_lab::{Model, ModelConfig};

fn setup(seed: u64) -> (Model, Vec<u32>, VerticalSlashPattern) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_kv = rng.random_range(1..3);
    let c = ModelConfig::new(rng.random_range(1..3), n_kv * rng.random_range(1..3), n_kv, 4, 8, 16, 64, seed);
    let model = Model::init_random(c.clone()).unwrap();
    let n = rng.random_range(2..40);
    let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..16)).collect();
    let n_vert = rng.random_range(1..=n);
    let n_slash = rng.random_range(1..=n);
    let pattern = VerticalSlashPattern {
        layers: (0..c.n_layers)
            .map(|_| {
                let scores: Vec<Vec<f64>> = (0..n_kv).map(|_| (0..n).map(|_| rng.random()).collect()).collect();
                build_pattern(&scores, n_vert, n_slash).unwrap()
            })
            .collect(),
    };
    (model, tokens, pattern)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ops_and_attention_follow_the_mask(seed in any::<u64>()) {
        let (model, tokens, pattern) = setup(seed);
        let c = model.config();
        let group = c.n_heads / c.n_kv_heads;
        let n = tokens.len();
        let t = sparse_prefill(&model, &tokens, &pattern, PrefillOptions { capture_attention: true }).unwrap();
        for (l, layer) in t.layers.iter().enumerate() {
            for (h, map) in layer.attention.as_ref().unwrap().iter().enumerate() {
                let kv = h / group;
                let mut allowed = 0u64;
                for q in 0..n {
                    let mut row_sum = 0.0;
                    for k in 0..n {
                        let ok = k <= q && pattern.allowed(l, kv, q, k).unwrap();
                        allowed += ok as u64;
                        if !ok {
                            prop_assert_eq!(map.at(q, k), 0.0);
                        }
                        row_sum += map.at(q, k);
                    }
                    prop_assert!((row_sum - 1.0).abs() < 1e-12);
                }
                prop_assert_eq!(layer.score_ops[h], allowed);
            }
        }
        let dense = forward_prefill(&model, &tokens, PrefillOptions::default()).unwrap();
        prop_assert!(t.total_score_ops() <= dense.total_score_ops());
        for (l, layer) in t.layers.iter().enumerate() {
            let h = &pattern.layers[l][0];
            let bound = (n * (h.vertical.len() + h.n_slash)) as u64;
            prop_assert!(layer.score_ops.iter().all(|&ops| ops <= bound));
        }
    }

    #[test]
    fn another_vertical_only_adds_coverage(seed in any::<u64>(), extra in 0usize..40) {
        let (_, tokens, pattern) = setup(seed);
        let n = tokens.len();
        let mut wider = pattern.clone();
        let head = &mut wider.layers[0][0];
        let add = extra % n;
        if let Err(at) = head.vertical.binary_search(&add) {
            head.vertical.insert(at, add);
        }
        for q in 0..n {
            for k in 0..=q {
                if pattern.allowed(0, 0, q, k).unwrap() {
                    prop_assert!(wider.allowed(0, 0, q, k).unwrap());
                }
            }
            prop_assert!(wider.allowed(0, 0, q, add.min(q)).unwrap() || add > q);
        }
    }
}

#[test]
fn diagonal_is_always_visible() {
    let p = VerticalSlashPattern { layers: vec![vec![HeadPattern { vertical: vec![0], n_slash: 1 }]] };
    assert!(p.allowed(0, 0, 5, 5).unwrap());
    assert!(p.allowed(0, 0, 5, 0).unwrap());
    assert!(!p.allowed(0, 0, 5, 3).unwrap());
    assert!(p.allowed(0, 0, 2, 3).is_err());
    assert!(build_pattern(&[vec![1.0]], 0, 1).is_err());
}

#[test]
fn pattern_shape_is_checked() {
    let (model, tokens, mut pattern) = setup(9);
    pattern.layers.pop();
    assert!(sparse_prefill(&model, &tokens, &pattern, PrefillOptions::default()).is_err());
}
