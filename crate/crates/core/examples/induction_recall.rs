//! The hand-built induction model answers key→value queries exactly, and its
//! answers agree with the task generator's own resolver.

use speckv_lab::bench::{generate_tasks, resolve, TaskSpec};
use speckv_lab::model::{build_induction_model, InductionSpec};
use speckv_lab::policy::{run_pipeline, PolicyConfig};

fn main() -> speckv_lab::Result<()> {
    let spec = InductionSpec::default();
    let model = build_induction_model(spec, spec.required_d_model())?;
    let vocab = spec.vocab();
    println!("induction model: d_model {}, vocab {}", model.config().d_model, vocab.size());

    for task in [TaskSpec::single_hop(16, 200, 1), TaskSpec::multi_hop(3, 24, 256, 2)] {
        let instances = generate_tasks(&task, &spec, 20)?;
        let (mut correct, mut agree) = (0, 0);
        for t in &instances {
            let run = run_pipeline(&model, &PolicyConfig::Dense, &t.prompt, t.answer.len(), None)?;
            correct += (run.output == t.answer) as usize;
            agree += (resolve(&t.prompt, &vocab).as_deref() == Some(&run.output[..])) as usize;
        }
        println!("{:<11} exact match {correct}/20, resolver agreement {agree}/20", task.kind_label());
    }
    Ok(())
}
