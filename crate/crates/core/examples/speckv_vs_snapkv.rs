//! Lookahead scoring on two-hop recall at a tight budget.
//!
//! SnapKV scores keys with the prompt's last window, which only knows the
//! first hop. SpecKV appends the draft's lookahead tokens as extra queries,
//! and the second-hop token then points at the pair it needs.

use speckv_lab::bench::{generate_one, run_needle_recall, TaskSpec};
use speckv_lab::model::{build_induction_model, InductionSpec};
use speckv_lab::policy::{Pipeline, SnapKvConfig, SpecKvConfig};
use speckv_lab::stats::sign_test;
use speckv_lab::PolicyConfig;

fn main() -> speckv_lab::Result<()> {
    let count: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(30);
    let ind = InductionSpec::default();
    let model = build_induction_model(ind, ind.required_d_model())?;
    let spec = TaskSpec::multi_hop(2, 32, 256, 7);
    let n_window = 32;

    let (mut snap_acc, mut snap_rec, mut spec_acc, mut spec_rec) = (vec![], vec![], vec![], vec![]);
    for i in 0..count {
        let t = generate_one(&spec, &ind, i)?;
        // window plus a quarter of the haystack's pair tokens
        let c_max = n_window + t.pair_token_count() / 4;
        let snap = PolicyConfig::SnapKv(SnapKvConfig { c_max, n_window: Some(n_window), ..Default::default() });
        let speckv = PolicyConfig::SpecKv(SpecKvConfig {
            c_max,
            n_window: Some(n_window),
            sparse_prefill: true,
            ..Default::default()
        });
        let a = Pipeline::new(&model, snap)?.run(&t.prompt, t.answer.len(), None)?;
        let b = Pipeline::new(&model, speckv)?.without_epsilon().run(&t.prompt, t.answer.len(), None)?;
        snap_acc.push(t.exact_match(&a.output));
        snap_rec.push(run_needle_recall(&t, &a));
        spec_acc.push(t.exact_match(&b.output));
        spec_rec.push(run_needle_recall(&t, &b));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("{count} two-hop instances");
    println!("snapkv  accuracy {:.3}  needle recall {:.3}", mean(&snap_acc), mean(&snap_rec));
    println!("speckv  accuracy {:.3}  needle recall {:.3}", mean(&spec_acc), mean(&spec_rec));
    let acc = sign_test(&spec_acc, &snap_acc)?;
    let rec = sign_test(&spec_rec, &snap_rec)?;
    println!("sign test accuracy: {} wins, {} losses, p = {:.2e}", acc.wins, acc.losses, acc.p_value);
    println!("sign test recall:   {} wins, {} losses, p = {:.2e}", rec.wins, rec.losses, rec.p_value);
    Ok(())
}
