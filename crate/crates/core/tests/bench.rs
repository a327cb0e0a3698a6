//! Task generation, config parsing and the runner's output files.

use proptest::prelude::*;
use speckv_lab::bench::{
    generate_one, generate_tasks, resolve, BenchConfig, BenchRunner, NeedlePlacement, TaskSpec, CSV_COLUMNS,
};
use speckv_lab::model::{InductionSpec, InductionVocab};
use speckv_lab::Error;

fn spec_strategy() -> impl Strategy<Value = TaskSpec> {
    (1usize..5, 0usize..30, 0usize..120, any::<u64>(), any::<bool>()).prop_map(|(hops, extra_pairs, slack, seed, fixed)| {
        let n_pairs = hops + extra_pairs;
        let len = 3 * n_pairs + TaskSpec::FRAME + slack;
        let mut s = if hops == 1 { TaskSpec::single_hop(n_pairs, len, seed) } else { TaskSpec::multi_hop(hops, n_pairs, len, seed) };
        if fixed {
            s.needle_positions = NeedlePlacement::Fixed;
        }
        s
    })
}

proptest! {
    #[test]
    fn generated_prompts_are_well_formed(spec in spec_strategy(), index in 0usize..50) {
        let ind = InductionSpec::default();
        let voc = ind.vocab();
        let t = generate_one(&spec, &ind, index).unwrap();
        prop_assert_eq!(t.prompt.len(), spec.haystack_len);
        prop_assert_eq!(t.prompt[0], InductionVocab::BOS);
        prop_assert_eq!(t.prompt[spec.haystack_len - 2], InductionVocab::QUERY);
        prop_assert_eq!(t.answer.len(), spec.hops());
        prop_assert!(voc.is_value(*t.answer.last().unwrap()));
        prop_assert_eq!(t.pair_spans.len(), spec.n_pairs);
        prop_assert_eq!(t.needle_spans.len(), spec.hops());
        for &(a, b) in &t.pair_spans {
            prop_assert_eq!(b - a, 2);
            prop_assert!(voc.is_key(t.prompt[a]));
            prop_assert_eq!(t.prompt[b], InductionVocab::SEP);
        }
        // each key appears once as a pair key
        let mut keys: Vec<u32> = t.pair_spans.iter().map(|&(a, _)| t.prompt[a]).collect();
        keys.sort_unstable();
        keys.dedup();
        prop_assert_eq!(keys.len(), spec.n_pairs);
        prop_assert_eq!(resolve(&t.prompt, &voc), Some(t.answer.clone()));
        prop_assert_eq!(t.needle_recall(&(0..t.prompt.len()).collect::<Vec<_>>()), 1.0);
        prop_assert_eq!(t.needle_recall(&[]), 0.0);
        prop_assert_eq!(&generate_one(&spec, &ind, index).unwrap(), &t);
    }
}

#[test]
fn generate_tasks_is_indexed_generation() {
    let ind = InductionSpec::default();
    let spec = TaskSpec::multi_hop(3, 10, 120, 4);
    let all = generate_tasks(&spec, &ind, 6).unwrap();
    for (i, t) in all.iter().enumerate() {
        assert_eq!(*t, generate_one(&spec, &ind, i).unwrap());
    }
    assert_ne!(all[0], all[1]);
}

const CONFIG: &str = r#"
count = 3
seed = 1

[[models]]
name = "induction"

[[policies]]
policy = "dense"

[[policies]]
policy = "speckv"
c_max = 24
n_window = 8
draft = { mode = "noise", sigma = 0.05, seed = 2 }

[[tasks]]
kind = "single_hop"
n_pairs = 4
haystack_len = 48
"#;

#[test]
fn runner_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BenchConfig::from_toml(CONFIG).unwrap();
    let records = BenchRunner::new(cfg).run_to_dir(dir.path()).unwrap();
    assert_eq!(records.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    let dense: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&dense[..6], &["induction", "dense", "single_hop", "48", "48", "3"]);
    assert_eq!(dense[6], "1");
    // nothing is dropped, so every needle survives
    assert_eq!(dense[7], "1");
    let spec: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(spec[1], "speckv[noise(sigma=0.05)]");
    assert!(spec[11].parse::<f64>().unwrap() > 0.0);

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(json[0]["instances"].as_array().unwrap().len(), 3);
    assert_eq!(json[1]["policy"]["policy"], "speckv");
}

#[test]
fn seed_changes_the_instances() {
    let cfg = BenchConfig::from_toml(CONFIG).unwrap();
    let a = BenchRunner::new(cfg.clone()).run().unwrap();
    let b = BenchRunner::new(cfg).seed(99).run().unwrap();
    assert_ne!(a[0].instances[0].answer.len(), 0);
    let answers = |r: &[speckv_lab::bench::ResultRecord]| r[0].instances.iter().map(|i| i.answer.clone()).collect::<Vec<_>>();
    assert_ne!(answers(&a), answers(&b));
}

#[test]
fn config_errors_name_the_problem() {
    let missing = BenchConfig::load(std::path::Path::new("/nonexistent/bench.toml")).unwrap_err();
    assert!(matches!(missing, Error::Config { .. }));
    let no_models = CONFIG.replace("[[models]]\nname = \"induction\"\n", "");
    assert!(BenchConfig::from_toml(&no_models).unwrap_err().to_string().contains("models"));
    let dup = format!("{CONFIG}\n[[models]]\nname = \"induction\"\n");
    assert!(BenchConfig::from_toml(&dup).unwrap_err().to_string().contains("unique"));
    let bad = CONFIG.replace("c_max = 24", "c_max = \"lots\"");
    let err = BenchConfig::from_toml(&bad).unwrap_err().to_string();
    assert!(err.contains("line"), "{err}");
}
