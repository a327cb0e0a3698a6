use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_norm_eps() -> f64 {
    1e-6
}

/// Shape and hyperparameters of a decoder-only transformer.
///
/// `rope_dims` limits rotary encoding to the first dims of each head (the
/// rest pass through unrotated); `abs_positions` adds a learned absolute
/// position table to the token embedding. Both exist so hand-built models can
/// route positional information exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub rope_base: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rope_dims: Option<usize>,
    #[serde(default)]
    pub abs_positions: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// A config with the common defaults filled in.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        n_kv_heads: usize,
        d_head: usize,
        d_mlp: usize,
        vocab_size: usize,
        max_positions: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            n_kv_heads,
            d_model: n_heads * d_head,
            d_head,
            d_mlp,
            vocab_size,
            max_positions,
            rope_base: 10_000.0,
            seed,
            rope_dims: None,
            abs_positions: false,
            norm_eps: default_norm_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!(
                "n_kv_heads {} does not divide n_heads {}",
                self.n_kv_heads, self.n_heads
            ));
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return bad("rope_base must be positive and finite".into());
        }
        let rd = self.rope_dims();
        if rd > self.d_head || !rd.is_multiple_of(2) {
            return bad(format!("rope_dims {rd} must be even and at most d_head"));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return bad("norm_eps must be a nonnegative finite number".into());
        }
        Ok(())
    }

    pub fn rope_dims(&self) -> usize {
        self.rope_dims.unwrap_or(self.d_head - self.d_head % 2)
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}
