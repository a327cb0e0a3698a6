//! Counted costs of every policy on the same prompt: q·k products in
//! prefill and decode, and the analytic peak and final KV bytes.

use speckv_lab::model::{Model, ModelConfig};
use speckv_lab::policy::*;

fn main() -> speckv_lab::Result<()> {
    let model = Model::init_random(ModelConfig::new(2, 4, 2, 8, 64, 64, 256, 9))?;
    let prompt: Vec<u32> = (0..160).map(|i| ((i * 13 + 5) % 64) as u32).collect();
    let n = prompt.len();
    let max_new = 6;
    let pc = PromptCompressionConfig { c_max: 96, ..Default::default() };
    let policies = vec![
        PolicyConfig::Dense,
        PolicyConfig::StreamingLlm(StreamingConfig { n_sink: 4, n_window: 60 }),
        PolicyConfig::H2o(H2oConfig { c_max: 64, n_window: None }),
        PolicyConfig::SnapKv(SnapKvConfig { c_max: 64, ..Default::default() }),
        PolicyConfig::SpecKv(SpecKvConfig { c_max: 64, n_vert: Some(32), n_slash: Some(32), sparse_prefill: true, ..Default::default() }),
        PolicyConfig::LaqPp(LaqConfig { c_max: 64, ..Default::default() }),
        PolicyConfig::SpecPc(pc.clone()),
        PolicyConfig::SpecPrefill(pc.clone()),
        PolicyConfig::SpecKvPc(SpecKvPcConfig { pc, kv: SpecKvConfig { c_max: 48, sparse_prefill: true, ..Default::default() } }),
    ];
    println!("prompt {n} tokens, {max_new} new; dense prefill per head = n(n+1)/2 = {}", n * (n + 1) / 2);
    println!("{:<14} {:>10} {:>10} {:>10} {:>12} {:>12}", "policy", "prefill", "decode", "draft", "peak bytes", "final bytes");
    for p in policies {
        let r = run_pipeline(&model, &p, &prompt, max_new, None)?;
        let c = r.costs;
        println!(
            "{:<14} {:>10} {:>10} {:>10} {:>12} {:>12}",
            r.policy, c.prefill_ops, c.decode_ops, r.draft_ops, c.kv_bytes_peak, c.kv_bytes_final
        );
    }
    Ok(())
}
