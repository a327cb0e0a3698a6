//! Policy-level invariants on random models and prompts.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speckv_lab::model::{build_induction_model, DraftMode, InductionSpec};
use speckv_lab::policy::*;
use speckv_lab::{Error, Model, ModelConfig};

fn setup(seed: u64) -> (Model, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_kv = rng.random_range(1..3);
    let c = ModelConfig::new(rng.random_range(1..3), n_kv * rng.random_range(1..3), n_kv, 4, 12, 24, 128, seed);
    let n = rng.random_range(20..70);
    let prompt = (0..n).map(|_| rng.random_range(0..24)).collect();
    (Model::init_random(c).unwrap(), prompt)
}

fn budgeted(c_max: usize, n_window: usize, sigma: f64) -> Vec<PolicyConfig> {
    let draft = DraftSpec { mode: DraftMode::Noise { sigma }, seed: 3 };
    let kv = SpecKvConfig { c_max, n_window: Some(n_window), sparse_prefill: true, draft, ..Default::default() };
    let pc = PromptCompressionConfig { c_max, n_window: Some(n_window), draft, ..Default::default() };
    vec![
        PolicyConfig::H2o(H2oConfig { c_max, n_window: Some(n_window) }),
        PolicyConfig::SnapKv(SnapKvConfig { c_max, n_window: Some(n_window), ..Default::default() }),
        PolicyConfig::SpecKv(kv.clone()),
        PolicyConfig::LaqPp(LaqConfig { c_max, n_window: Some(n_window), ..Default::default() }),
        PolicyConfig::SpecPc(pc.clone()),
        PolicyConfig::SpecPrefill(PromptCompressionConfig { n_window: Some(1), ..pc.clone() }),
        PolicyConfig::SpecKvPc(SpecKvPcConfig { pc: PromptCompressionConfig { c_max: c_max + 4, ..pc }, kv }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kept_sets_respect_budgets(seed in any::<u64>(), w in 1usize..6, extra in 0usize..12, sigma in 0.0f64..0.3) {
        let (model, prompt) = setup(seed);
        let n = prompt.len();
        let c_max = w + extra;
        for p in budgeted(c_max, w, sigma) {
            let r = run_pipeline(&model, &p, &prompt, 3, None).unwrap();
            prop_assert_eq!(r.output.len(), 3);
            if let Some(sets) = &r.kept_kv {
                prop_assert_eq!(sets.len(), model.config().n_layers * model.config().n_kv_heads);
                let coords = r.kept_prompt.as_ref().map_or(n, |k| *k.last().unwrap() + 1);
                for s in sets {
                    prop_assert!(s.len() <= c_max, "{} kept {}", p.name(), s.len());
                    prop_assert!(s.windows(2).all(|x| x[0] < x[1]));
                    prop_assert!(s.iter().all(|&i| i < coords));
                }
                // the most recent prompt token is always cached
                prop_assert!(sets.iter().all(|s| s.contains(&(coords - 1))), "{}", p.name());
            }
            if let Some(kept) = &r.kept_prompt {
                let budget = match &p { PolicyConfig::SpecKvPc(c) => c.pc.c_max, _ => c_max };
                prop_assert!(kept.len() <= budget);
                prop_assert!(kept.contains(&(n - 1)));
            }
            if p.draft().is_some() {
                prop_assert!(r.epsilon.unwrap() >= 0.0);
                prop_assert!(r.draft_ops > 0);
            }
        }
    }
}

#[test]
fn streaming_keeps_sinks_and_recent_tokens() {
    let (model, prompt) = setup(5);
    let n = prompt.len();
    let r = run_pipeline(&model, &PolicyConfig::StreamingLlm(StreamingConfig { n_sink: 3, n_window: 5 }), &prompt, 2, None).unwrap();
    let want: Vec<usize> = (0..3).chain(n - 5..n).collect();
    assert!(r.kept_kv.unwrap().iter().all(|s| *s == want));
}

#[test]
fn identical_draft_has_zero_epsilon() {
    let (model, prompt) = setup(6);
    let p = PolicyConfig::SpecKv(SpecKvConfig { c_max: 12, n_window: Some(4), sparse_prefill: false, ..Default::default() });
    let r = run_pipeline(&model, &p, &prompt, 4, None).unwrap();
    assert!(r.epsilon.unwrap().abs() < 1e-12, "{:?}", r.epsilon);
    // the lookahead is the target's own greedy continuation
    let dense = run_pipeline(&model, &PolicyConfig::Dense, &prompt, 4, None).unwrap();
    assert_eq!(r.lookahead, dense.output);
}

#[test]
fn runs_are_deterministic() {
    let (model, prompt) = setup(7);
    for p in budgeted(10, 4, 0.2) {
        let a = run_pipeline(&model, &p, &prompt, 3, None).unwrap();
        let b = run_pipeline(&model, &p, &prompt, 3, None).unwrap();
        assert_eq!((a.output, a.kept_kv, a.kept_prompt, a.costs), (b.output, b.kept_kv, b.kept_prompt, b.costs));
        assert_eq!(a.epsilon, b.epsilon);
    }
}

#[test]
fn stop_token_ends_generation() {
    let (model, prompt) = setup(8);
    let full = run_pipeline(&model, &PolicyConfig::Dense, &prompt, 6, None).unwrap();
    let stop = full.output[1];
    let cut = run_pipeline(&model, &PolicyConfig::Dense, &prompt, 6, Some(stop)).unwrap();
    let first = full.output.iter().position(|&t| t == stop).unwrap();
    assert_eq!(cut.output, full.output[..=first]);
}

#[test]
fn budget_below_window_fails() {
    let (model, prompt) = setup(9);
    // SpecPrefill's one-token window fits any budget
    for p in budgeted(3, 6, 0.0).into_iter().filter(|p| p.name() != "specprefill") {
        let err = run_pipeline(&model, &p, &prompt, 2, None).unwrap_err();
        assert!(matches!(err, Error::Budget(_)), "{}: {err}", p.name());
    }
}

#[test]
fn resolved_parameters_follow_the_scaling_rule() {
    let (model, prompt) = setup(10);
    let n = prompt.len();
    let r = run_pipeline(&model, &PolicyConfig::SnapKv(SnapKvConfig { c_max: n / 2, ..Default::default() }), &prompt, 2, None).unwrap();
    let half = n / 2;
    assert_eq!(r.resolved["n_window"], serde_json::json!(32.min(half)));
    let k = r.resolved["kernel"].as_u64().unwrap() as usize;
    assert_eq!(k % 2, 1);
    assert!(k <= 7.min(half));
    assert_eq!(r.resolved["reduce"], "mean");
}

#[test]
fn defaults_for_long_prompts() {
    // long enough that no default is scaled down
    let ind = InductionSpec { max_positions: 400, ..InductionSpec::default() };
    let model = build_induction_model(ind, ind.required_d_model()).unwrap();
    let prompt: Vec<u32> = (0..300).map(|i| ind.vocab().filler(i % ind.n_filler)).collect();
    let check = |p: PolicyConfig, want: serde_json::Value| {
        let r = Pipeline::new(&model, p).unwrap().without_epsilon().run(&prompt, 2, None).unwrap();
        for (k, v) in want.as_object().unwrap() {
            assert_eq!(&r.resolved[k], v, "{} {k}", r.policy);
        }
    };
    check(
        PolicyConfig::SnapKv(SnapKvConfig { c_max: 100, ..Default::default() }),
        serde_json::json!({"n_window": 32, "kernel": 7, "reduce": "mean"}),
    );
    check(
        PolicyConfig::SpecKv(SpecKvConfig { c_max: 100, ..Default::default() }),
        serde_json::json!({"n_window": 32, "kernel": 7, "reduce": "max", "n_lookahead": 2, "n_vert": 150, "n_slash": 150}),
    );
    check(
        PolicyConfig::LaqPp(LaqConfig { c_max: 100, ..Default::default() }),
        serde_json::json!({"n_window": 32, "kernel": 7, "reduce": "max", "n_lookahead": 8, "initial_cache": 100}),
    );
    let pc = PromptCompressionConfig { c_max: 200, ..Default::default() };
    check(
        PolicyConfig::SpecPc(pc.clone()),
        serde_json::json!({"n_window": 64, "kernel": 63, "n_neighbor": 63, "l_skip": 8.min(model.config().n_layers - 1), "n_lookahead": 1, "reduce": "max"}),
    );
    check(
        PolicyConfig::SpecPrefill(pc),
        serde_json::json!({"n_window": 1, "kernel": 13, "n_neighbor": 31, "n_lookahead": 8, "reduce": "mean_max"}),
    );
}

#[test]
fn budgets_are_met_exactly() {
    let (model, prompt) = setup(11);
    let n = prompt.len();
    let c = model.config();
    let c_max = 16;
    let max_new = 4;
    let mut probe = speckv_lab::KVCache::for_model(c);
    probe.append(0, 0, &vec![0.0; c.d_head], &vec![0.0; c.d_head], 0).unwrap();
    let entry_bytes = probe.snapshot_costs().kv_bytes_final;
    for p in budgeted(c_max, 4, 0.1) {
        let r = run_pipeline(&model, &p, &prompt, max_new, None).unwrap();
        if let Some(sets) = &r.kept_kv {
            assert!(sets.iter().all(|s| s.len() == c_max), "{}", p.name());
            // after decoding, each slot holds its kept set plus the decoded tokens
            let slots = (c.n_layers * c.n_kv_heads) as u64;
            assert!(r.costs.kv_bytes_final <= slots * (c_max + max_new) as u64 * entry_bytes);
        } else if let Some(kept) = &r.kept_prompt {
            assert_eq!(kept.len(), c_max.min(n), "{}", p.name());
        }
    }
}

#[test]
fn peak_memory_and_cascade_savings() {
    let model = Model::init_random(ModelConfig::new(2, 2, 1, 4, 12, 24, 160, 12)).unwrap();
    let prompt: Vec<u32> = (0..120).map(|i| (i * 11 % 24) as u32).collect();
    let c_max = 20; // n_in = 120 > L·C_max = 40
    let kv = SpecKvConfig { c_max, n_window: Some(8), n_vert: Some(16), n_slash: Some(16), sparse_prefill: true, ..Default::default() };
    let run = |p: PolicyConfig| run_pipeline(&model, &p, &prompt, 3, None).unwrap();
    let dense = run(PolicyConfig::Dense);
    let speckv = run(PolicyConfig::SpecKv(kv.clone()));
    let laq = run(PolicyConfig::LaqPp(LaqConfig { c_max, n_window: Some(8), ..Default::default() }));
    assert_eq!(laq.costs.kv_bytes_peak, dense.costs.kv_bytes_peak);
    assert!(laq.costs.kv_bytes_peak > speckv.costs.kv_bytes_peak);
    let pc = PromptCompressionConfig { c_max: 60, n_window: Some(8), ..Default::default() };
    let cascade = run(PolicyConfig::SpecKvPc(SpecKvPcConfig { pc, kv }));
    assert!(cascade.costs.prefill_ops < speckv.costs.prefill_ops);
    assert!(cascade.costs.kv_bytes_peak < speckv.costs.kv_bytes_peak);
}
