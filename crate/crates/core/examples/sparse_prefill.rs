//! Vertical-slash sparse prefill: each head keeps its highest-scoring key
//! columns plus a band of recent diagonals. Op counts fall with the pattern
//! size, and a pattern covering every key reproduces dense prefill.

use speckv_lab::importance::{layer_window_scores, HeadLayout, Reduce, WindowParams};
use speckv_lab::model::{forward_prefill, Model, ModelConfig, PrefillOptions};
use speckv_lab::sparse_prefill::{build_pattern, sparse_prefill, VerticalSlashPattern};

fn main() -> speckv_lab::Result<()> {
    let model = Model::init_random(ModelConfig::new(2, 4, 2, 8, 64, 50, 128, 3))?;
    let tokens: Vec<u32> = (0..96).map(|i| (i * 7 % 50) as u32).collect();
    let n = tokens.len();
    let dense = forward_prefill(&model, &tokens, PrefillOptions::default())?;
    let layout = HeadLayout::from(model.config());
    let params = WindowParams { n_in: n, n_window: 16, kernel: 5, reduce: Reduce::Max };

    for (n_vert, n_slash) in [(8, 8), (24, 16), (n, n)] {
        let mut pattern = VerticalSlashPattern::default();
        for l in 0..model.config().n_layers {
            let q = &dense.layers[l].q;
            let k = &dense.layers[l].k;
            let scores: Vec<Vec<f64>> = (0..layout.n_kv_heads)
                .map(|h| layer_window_scores(q, k, layout, h, params))
                .collect::<Result<_, _>>()?;
            pattern.layers.push(build_pattern(&scores, n_vert, n_slash)?);
        }
        let sparse = sparse_prefill(&model, &tokens, &pattern, PrefillOptions::default())?;
        let max_diff = sparse
            .logits
            .data()
            .iter()
            .zip(dense.logits.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!(
            "n_vert {n_vert:>3} n_slash {n_slash:>3}: ops {:>6} (dense {}), max |logit diff| {max_diff:.3e}",
            sparse.total_score_ops(),
            dense.total_score_ops()
        );
    }
    Ok(())
}
