//! Decoder-only transformer: weights, prefill, greedy decode, draft derivation
//! and a hand-built induction model.

mod config;
mod draft;
mod forward;
mod induction;
mod io;

pub use config::ModelConfig;
pub use draft::{derive_draft, DraftMode};
pub use forward::{
    decode_greedy, decode_step, forward_prefill, forward_prefill_with, DecodeCapture, DecodeOptions,
    ForwardTrace, HeadMask, LayerMask, LayerTrace, MaskSource, PrefillOptions,
};
pub use induction::{build_induction_model, InductionSpec, InductionVocab};
pub use io::{load_model, read_model, save_model, write_model};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    /// `d_model × n_heads·d_head`
    pub wq: Tensor,
    /// `d_model × n_kv_heads·d_head`
    pub wk: Tensor,
    /// `d_model × n_kv_heads·d_head`
    pub wv: Tensor,
    /// `n_heads·d_head × d_model`
    pub wo: Tensor,
    pub mlp_norm: Vec<f64>,
    /// `d_model × d_mlp`
    pub w_gate: Tensor,
    /// `d_model × d_mlp`
    pub w_up: Tensor,
    /// `d_mlp × d_model`
    pub w_down: Tensor,
}

/// Immutable model weights. Build with [`Model::init_random`],
/// [`Model::from_parts`], [`build_induction_model`] or [`load_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    /// `vocab × d_model`
    embed: Tensor,
    /// `max_positions × d_model`, present iff `config.abs_positions`
    pos_embed: Option<Tensor>,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f64>,
    /// `d_model × vocab`
    unembed: Tensor,
}

impl Model {
    pub fn init_random(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::matrix(rows, cols, data).expect("shape matches data")
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let embed = uniform(config.vocab_size, d, 1.0);
        let pos_embed = config
            .abs_positions
            .then(|| uniform(config.max_positions, d, 1.0));
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: uniform(d, config.q_width(), fan(d)),
                wk: uniform(d, config.kv_width(), fan(d)),
                wv: uniform(d, config.kv_width(), fan(d)),
                wo: uniform(config.q_width(), d, fan(config.q_width())),
                mlp_norm: vec![1.0; d],
                w_gate: uniform(d, config.d_mlp, fan(d)),
                w_up: uniform(d, config.d_mlp, fan(d)),
                w_down: uniform(config.d_mlp, d, fan(config.d_mlp)),
            })
            .collect();
        let unembed = uniform(d, config.vocab_size, fan(d));
        Self::from_parts(config, embed, pos_embed, layers, vec![1.0; d], unembed)
    }

    /// Assemble a model from explicit weights, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        embed: Tensor,
        pos_embed: Option<Tensor>,
        layers: Vec<LayerWeights>,
        final_norm: Vec<f64>,
        unembed: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let check = |name: &str, t: &Tensor, r: usize, c: usize| -> Result<()> {
            if t.shape() != [r, c] {
                return Err(Error::InvalidConfig(format!(
                    "{name} has shape {:?}, expected [{r}, {c}]",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("model weights"));
            }
            Ok(())
        };
        let check_norm = |name: &str, v: &[f64]| -> Result<()> {
            if v.len() != d {
                return Err(Error::InvalidConfig(format!("{name} has length {}, expected {d}", v.len())));
            }
            Ok(())
        };
        check("embed", &embed, config.vocab_size, d)?;
        match (&pos_embed, config.abs_positions) {
            (Some(p), true) => check("pos_embed", p, config.max_positions, d)?,
            (None, false) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "pos_embed presence must match abs_positions".into(),
                ))
            }
        }
        if layers.len() != config.n_layers {
            return Err(Error::InvalidConfig(format!(
                "{} layers supplied for n_layers {}",
                layers.len(),
                config.n_layers
            )));
        }
        for l in &layers {
            check_norm("attn_norm", &l.attn_norm)?;
            check_norm("mlp_norm", &l.mlp_norm)?;
            check("wq", &l.wq, d, config.q_width())?;
            check("wk", &l.wk, d, config.kv_width())?;
            check("wv", &l.wv, d, config.kv_width())?;
            check("wo", &l.wo, config.q_width(), d)?;
            check("w_gate", &l.w_gate, d, config.d_mlp)?;
            check("w_up", &l.w_up, d, config.d_mlp)?;
            check("w_down", &l.w_down, config.d_mlp, d)?;
        }
        check_norm("final_norm", &final_norm)?;
        check("unembed", &unembed, d, config.vocab_size)?;
        Ok(Self {
            config,
            embed,
            pos_embed,
            layers,
            final_norm,
            unembed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.layers[l]
    }

    pub fn embed(&self) -> &Tensor {
        &self.embed
    }

    pub fn pos_embed(&self) -> Option<&Tensor> {
        self.pos_embed.as_ref()
    }

    pub fn final_norm(&self) -> &[f64] {
        &self.final_norm
    }

    pub fn unembed(&self) -> &Tensor {
        &self.unembed
    }

    /// Every weight buffer in serialization order.
    pub(crate) fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embed.data()];
        if let Some(p) = &self.pos_embed {
            out.push(p.data());
        }
        for l in &self.layers {
            out.extend([
                &l.attn_norm[..],
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                &l.mlp_norm[..],
                l.w_gate.data(),
                l.w_up.data(),
                l.w_down.data(),
            ]);
        }
        out.push(&self.final_norm);
        out.push(self.unembed.data());
        out
    }

    pub(crate) fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embed.data_mut()];
        if let Some(p) = &mut self.pos_embed {
            out.push(p.data_mut());
        }
        for l in &mut self.layers {
            out.push(&mut l.attn_norm[..]);
            out.push(l.wq.data_mut());
            out.push(l.wk.data_mut());
            out.push(l.wv.data_mut());
            out.push(l.wo.data_mut());
            out.push(&mut l.mlp_norm[..]);
            out.push(l.w_gate.data_mut());
            out.push(l.w_up.data_mut());
            out.push(l.w_down.data_mut());
        }
        out.push(&mut self.final_norm[..]);
        out.push(self.unembed.data_mut());
        out
    }

    /// Keep the first `n` layers, sharing final norm and unembedding.
    pub(crate) fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.config.n_layers {
            return Err(Error::invalid(format!(
                "cannot keep {n} of {} layers",
                self.config.n_layers
            )));
        }
        let mut m = self.clone();
        m.layers.truncate(n);
        m.config.n_layers = n;
        Ok(m)
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_positions {
            return Err(Error::LengthOverflow {
                len: tokens.len(),
                max: self.config.max_positions,
            });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfVocab {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_group() {
        let mut c = ModelConfig::new(1, 3, 2, 4, 8, 10, 16, 0);
        assert!(Model::init_random(c.clone()).is_err());
        c.n_kv_heads = 1;
        assert!(Model::init_random(c).is_ok());
    }

    #[test]
    fn same_seed_same_weights() {
        let c = ModelConfig::new(2, 2, 1, 4, 8, 10, 16, 5);
        assert_eq!(Model::init_random(c.clone()).unwrap(), Model::init_random(c).unwrap());
    }

    #[test]
    fn from_parts_checks_shapes() {
        let m = Model::init_random(ModelConfig::new(1, 1, 1, 4, 4, 6, 8, 1)).unwrap();
        let bad = Model::from_parts(
            m.config().clone(),
            Tensor::zeros(&[5, 4]),
            None,
            m.layers().to_vec(),
            m.final_norm().to_vec(),
            m.unembed().clone(),
        );
        assert!(bad.is_err());
    }
}
