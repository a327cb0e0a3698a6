//! Prompt compression with a draft model: SpecPC and SpecPrefill keep a
//! subset of prompt tokens, and the SpecKV-PC cascade then drops KV entries
//! from the shortened prompt.

use speckv_lab::bench::{generate_tasks, run_needle_recall, TaskSpec};
use speckv_lab::model::{build_induction_model, InductionSpec};
use speckv_lab::policy::{Pipeline, PromptCompressionConfig, SpecKvConfig, SpecKvPcConfig};
use speckv_lab::PolicyConfig;

fn main() -> speckv_lab::Result<()> {
    let ind = InductionSpec::default();
    let model = build_induction_model(ind, ind.required_d_model())?;
    let tasks = generate_tasks(&TaskSpec::single_hop(8, 192, 5), &ind, 10)?;
    let pc = PromptCompressionConfig { c_max: 96, ..Default::default() };
    let policies = [
        PolicyConfig::SpecPc(pc.clone()),
        PolicyConfig::SpecPrefill(pc.clone()),
        PolicyConfig::SpecKvPc(SpecKvPcConfig {
            pc,
            kv: SpecKvConfig { c_max: 64, sparse_prefill: true, ..Default::default() },
        }),
    ];
    for policy in policies {
        let pipeline = Pipeline::new(&model, policy)?.without_epsilon();
        let (mut acc, mut rec, mut kept) = (0.0, 0.0, 0usize);
        for t in &tasks {
            let r = pipeline.run(&t.prompt, t.answer.len(), None)?;
            acc += t.exact_match(&r.output);
            rec += run_needle_recall(t, &r);
            kept += r.kept_prompt.as_ref().map_or(0, Vec::len);
        }
        let n = tasks.len() as f64;
        println!(
            "{:<12} accuracy {:.2}  needle recall {:.2}  mean prompt kept {:.0}/192",
            pipeline.policy().name(),
            acc / n,
            rec / n,
            kept as f64 / n
        );
    }
    Ok(())
}
