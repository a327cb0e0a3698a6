//! A two-layer attention-only model that performs key→value lookup exactly.
//!
//! The residual stream is split into orthogonal one-hot blocks:
//!
//! ```text
//! [ TOK: vocab | POS: max_positions | PREV: n_keys | ANS: n_keys + n_values | unused ]
//! ```
//!
//! Layer 0 is a previous-token head: position `p` attends to `p - 1` through
//! the POS block and copies that token (if it is a key) into PREV. Layer 1
//! matches the current key token against PREV and copies the token sitting at
//! the matched position into ANS, which the unembedding reads out. Separator
//! and filler positions get a negative bias in layer 1 so a match on them
//! never wins. All MLP weights are zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{LayerWeights, Model, ModelConfig};

/// Attention logit gap used for hard matches.
const MATCH_LOGIT: f64 = 100.0;

/// Size of every one-hot residual entry. Normalization makes attention
/// logits independent of it, but a large amplitude keeps the signal well
/// above the noise that dense weight perturbations inject across all
/// `d_model` coordinates.
pub const SIGNAL_AMPLITUDE: f64 = 1024.0;

/// Weight of the answer readout, which sets the logit margin of a correct
/// lookup against perturbed unembedding rows.
const READOUT_GAIN: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionSpec {
    pub n_keys: usize,
    pub n_values: usize,
    pub n_filler: usize,
    pub max_positions: usize,
}

impl Default for InductionSpec {
    fn default() -> Self {
        Self {
            n_keys: 40,
            n_values: 24,
            n_filler: 12,
            max_positions: 264,
        }
    }
}

impl InductionSpec {
    pub fn vocab(&self) -> InductionVocab {
        InductionVocab {
            n_filler: self.n_filler,
            n_keys: self.n_keys,
            n_values: self.n_values,
        }
    }

    /// Smallest residual width that fits every one-hot block.
    pub fn required_d_model(&self) -> usize {
        let v = self.vocab();
        v.size() + self.max_positions + self.n_keys + self.n_keys + self.n_values
    }
}

/// Token id layout: `BOS, QUERY, SEP`, then fillers, keys, values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InductionVocab {
    pub n_filler: usize,
    pub n_keys: usize,
    pub n_values: usize,
}

impl InductionVocab {
    pub const BOS: u32 = 0;
    pub const QUERY: u32 = 1;
    pub const SEP: u32 = 2;

    pub fn size(&self) -> usize {
        3 + self.n_filler + self.n_keys + self.n_values
    }

    pub fn filler(&self, i: usize) -> u32 {
        debug_assert!(i < self.n_filler);
        (3 + i) as u32
    }

    pub fn key(&self, i: usize) -> u32 {
        debug_assert!(i < self.n_keys);
        (3 + self.n_filler + i) as u32
    }

    pub fn value(&self, i: usize) -> u32 {
        debug_assert!(i < self.n_values);
        (3 + self.n_filler + self.n_keys + i) as u32
    }

    pub fn key_index(&self, t: u32) -> Option<usize> {
        let t = t as usize;
        let lo = 3 + self.n_filler;
        (lo..lo + self.n_keys).contains(&t).then(|| t - lo)
    }

    pub fn is_key(&self, t: u32) -> bool {
        self.key_index(t).is_some()
    }

    pub fn is_value(&self, t: u32) -> bool {
        let lo = 3 + self.n_filler + self.n_keys;
        (lo..lo + self.n_values).contains(&(t as usize))
    }

    pub fn is_filler(&self, t: u32) -> bool {
        (3..3 + self.n_filler).contains(&(t as usize))
    }
}

pub fn build_induction_model(spec: InductionSpec, d_model: usize) -> Result<Model> {
    let need = spec.required_d_model();
    if d_model < need {
        return Err(Error::invalid(format!(
            "induction model needs d_model >= {need} for its one-hot blocks, got {d_model}"
        )));
    }
    if spec.n_keys == 0 || spec.n_values == 0 || spec.max_positions < 2 {
        return Err(Error::invalid("induction model needs keys, values and at least 2 positions"));
    }
    let voc = spec.vocab();
    let vocab = voc.size();
    let d = d_model;
    let df = d as f64;
    let tok = |t: usize| t;
    let pos = |p: usize| vocab + p;
    let prev = |k: usize| vocab + spec.max_positions + k;
    // answer slot for any key or value token, indexed by (token - first key)
    let first_key = voc.key(0) as usize;
    let ans = |t: usize| vocab + spec.max_positions + spec.n_keys + (t - first_key);

    let config = ModelConfig {
        n_layers: 2,
        n_heads: 1,
        n_kv_heads: 1,
        d_model: d,
        d_head: d,
        d_mlp: 1,
        vocab_size: vocab,
        max_positions: spec.max_positions,
        rope_base: 10_000.0,
        seed: 0,
        rope_dims: Some(0),
        abs_positions: true,
        norm_eps: 1e-12,
    };

    let mut embed = Tensor::zeros(&[vocab, d]);
    for t in 0..vocab {
        embed.set(t, tok(t), SIGNAL_AMPLITUDE);
    }
    let mut pos_embed = Tensor::zeros(&[spec.max_positions, d]);
    for p in 0..spec.max_positions {
        pos_embed.set(p, pos(p), SIGNAL_AMPLITUDE);
    }

    // Layer 0: one token and one position coordinate, so each normalized
    // coordinate is sqrt(d/2). Logit = a² (d/2) / sqrt(d). The value scale
    // writes PREV back at full amplitude.
    let a0 = (2.0 * MATCH_LOGIT / df.sqrt()).sqrt();
    let c0 = SIGNAL_AMPLITUDE * (2.0 / df).sqrt();
    let mut l0 = empty_layer(d);
    for p in 1..spec.max_positions {
        l0.wq.set(pos(p), pos(p - 1), a0);
    }
    for p in 0..spec.max_positions {
        l0.wk.set(pos(p), pos(p), a0);
    }
    for k in 0..spec.n_keys {
        let t = voc.key(k) as usize;
        l0.wv.set(tok(t), prev(k), c0);
        l0.wo.set(prev(k), prev(k), 1.0);
    }

    // Layer 1: the matched key position carries token, position and PREV
    // coordinates (normalized to sqrt(d/3) each); the query carries 2 or 3.
    // The weaker case still gives a logit of MATCH_LOGIT.
    let a1 = (3.0 * MATCH_LOGIT / df.sqrt()).sqrt();
    let c1 = SIGNAL_AMPLITUDE * (3.0 / df).sqrt();
    let mut l1 = empty_layer(d);
    for k in 0..spec.n_keys {
        let t = voc.key(k) as usize;
        l1.wq.set(tok(t), tok(t), a1);
        l1.wk.set(prev(k), tok(t), a1);
    }
    for x in 0..vocab as u32 {
        if voc.is_key(x) || voc.is_value(x) {
            continue;
        }
        for k in 0..spec.n_keys {
            l1.wk.set(tok(x as usize), tok(voc.key(k) as usize), -a1);
        }
    }
    for t in first_key..vocab {
        l1.wv.set(tok(t), ans(t), c1);
        l1.wo.set(ans(t), ans(t), 1.0);
    }

    let mut unembed = Tensor::zeros(&[d, vocab]);
    for t in first_key..vocab {
        unembed.set(ans(t), t, READOUT_GAIN);
    }
    Model::from_parts(config, embed, Some(pos_embed), vec![l0, l1], vec![1.0; d], unembed)
}

fn empty_layer(d: usize) -> LayerWeights {
    LayerWeights {
        attn_norm: vec![1.0; d],
        wq: Tensor::zeros(&[d, d]),
        wk: Tensor::zeros(&[d, d]),
        wv: Tensor::zeros(&[d, d]),
        wo: Tensor::zeros(&[d, d]),
        mlp_norm: vec![1.0; d],
        w_gate: Tensor::zeros(&[d, 1]),
        w_up: Tensor::zeros(&[d, 1]),
        w_down: Tensor::zeros(&[1, d]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_prefill, PrefillOptions};
    use crate::tensor::argmax;

    fn small() -> (InductionSpec, Model) {
        let spec = InductionSpec {
            n_keys: 6,
            n_values: 5,
            n_filler: 3,
            max_positions: 40,
        };
        let m = build_induction_model(spec, spec.required_d_model()).unwrap();
        (spec, m)
    }

    #[test]
    fn recalls_a_single_pair() {
        let (spec, m) = small();
        let v = spec.vocab();
        let prompt = vec![
            InductionVocab::BOS,
            v.filler(0),
            v.key(3),
            v.value(2),
            InductionVocab::SEP,
            v.key(1),
            v.value(4),
            InductionVocab::SEP,
            v.filler(1),
            InductionVocab::QUERY,
            v.key(3),
        ];
        let t = forward_prefill(&m, &prompt, PrefillOptions::default()).unwrap();
        assert_eq!(argmax(t.last_logits()) as u32, v.value(2));
    }

    #[test]
    fn rejects_narrow_width() {
        let spec = InductionSpec::default();
        assert!(build_induction_model(spec, spec.required_d_model() - 1).is_err());
    }
}
