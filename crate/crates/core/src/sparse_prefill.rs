//! Vertical-slash sparse prefill.
//!
//! A query at position `q` sees key `k <= q` when `k` is one of the head's
//! selected vertical columns or lies on one of the last `n_slash` diagonals.
//! The mask is applied over a dense computation; only the op counters reflect
//! the saving.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{layer_window_scores, HeadLayout, WindowParams};
use crate::model::{forward_prefill_with, ForwardTrace, HeadMask, LayerMask, MaskSource, Model, PrefillOptions};
use crate::tensor::{arg_topk, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadPattern {
    /// Ascending vertical column indices.
    pub vertical: Vec<usize>,
    pub n_slash: usize,
}

/// Indexed `[layer][kv_head]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerticalSlashPattern {
    pub layers: Vec<Vec<HeadPattern>>,
}

/// Pattern for one layer: the top `n_vert` keys of each head's scores.
pub fn build_pattern(head_scores: &[Vec<f64>], n_vert: usize, n_slash: usize) -> Result<Vec<HeadPattern>> {
    if n_vert == 0 || n_slash == 0 {
        return Err(Error::invalid("n_vert and n_slash must both be at least 1"));
    }
    Ok(head_scores
        .iter()
        .map(|s| HeadPattern {
            vertical: arg_topk(s, n_vert),
            n_slash,
        })
        .collect())
}

impl HeadPattern {
    pub fn to_mask(&self, n: usize) -> HeadMask {
        let mut vertical = vec![false; n];
        for &v in &self.vertical {
            if v < n {
                vertical[v] = true;
            }
        }
        HeadMask {
            vertical,
            n_slash: self.n_slash,
        }
    }
}

impl VerticalSlashPattern {
    pub fn allowed(&self, layer: usize, kv_head: usize, q: usize, k: usize) -> Result<bool> {
        if k > q {
            return Err(Error::invalid(format!("key {k} is after query {q}")));
        }
        let h = self
            .layers
            .get(layer)
            .and_then(|l| l.get(kv_head))
            .ok_or(Error::OutOfRange { index: layer, len: self.layers.len() })?;
        Ok(q - k < h.n_slash || h.vertical.binary_search(&k).is_ok())
    }
}

struct FixedPattern<'a> {
    pattern: &'a VerticalSlashPattern,
    n: usize,
}

impl MaskSource for FixedPattern<'_> {
    fn layer_mask(&mut self, layer: usize, _q: &Tensor, _k: &Tensor) -> Result<Option<LayerMask>> {
        let heads = self
            .pattern
            .layers
            .get(layer)
            .ok_or(Error::OutOfRange { index: layer, len: self.pattern.layers.len() })?;
        Ok(Some(LayerMask {
            heads: heads.iter().map(|h| h.to_mask(self.n)).collect(),
        }))
    }
}

/// Prefill restricted to a precomputed pattern.
pub fn sparse_prefill(model: &Model, tokens: &[u32], pattern: &VerticalSlashPattern, opts: PrefillOptions) -> Result<ForwardTrace> {
    let c = model.config();
    if pattern.layers.len() != c.n_layers || pattern.layers.iter().any(|l| l.len() != c.n_kv_heads) {
        return Err(Error::ShapeMismatch {
            op: "sparse_prefill pattern",
            left: vec![pattern.layers.len()],
            right: vec![c.n_layers, c.n_kv_heads],
        });
    }
    let mut src = FixedPattern { pattern, n: tokens.len() };
    forward_prefill_with(model, tokens, opts, Some(&mut src))
}

/// Builds each layer's mask from that same layer's window and lookahead
/// queries during a single prefill, recording the scores it used.
pub struct LookaheadMaskSource {
    layout: HeadLayout,
    params: WindowParams,
    n_vert: usize,
    n_slash: usize,
    sparse: bool,
    /// `[layer][kv_head]` scores over the early keys.
    pub scores: Vec<Vec<Vec<f64>>>,
    pub pattern: VerticalSlashPattern,
}

impl LookaheadMaskSource {
    /// With `sparse == false` the scores are still recorded but attention
    /// stays dense.
    pub fn new(layout: HeadLayout, params: WindowParams, n_vert: usize, n_slash: usize, sparse: bool) -> Result<Self> {
        if sparse && (n_vert == 0 || n_slash == 0) {
            return Err(Error::invalid("n_vert and n_slash must both be at least 1"));
        }
        Ok(Self {
            layout,
            params,
            n_vert,
            n_slash,
            sparse,
            scores: Vec::new(),
            pattern: VerticalSlashPattern::default(),
        })
    }
}

impl MaskSource for LookaheadMaskSource {
    fn layer_mask(&mut self, _layer: usize, q: &Tensor, k: &Tensor) -> Result<Option<LayerMask>> {
        let scores = (0..self.layout.n_kv_heads)
            .map(|h| layer_window_scores(q, k, self.layout, h, self.params))
            .collect::<Result<Vec<_>>>()?;
        let mask = if self.sparse {
            let heads = build_pattern(&scores, self.n_vert, self.n_slash)?;
            let mask = LayerMask {
                heads: heads.iter().map(|h| h.to_mask(q.rows())).collect(),
            };
            self.pattern.layers.push(heads);
            Some(mask)
        } else {
            None
        };
        self.scores.push(scores);
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_examples() {
        let p = build_pattern(&[vec![0.9, 0.1, 0.5]], 2, 1).unwrap();
        assert_eq!(p[0].vertical, vec![0, 2]);
        assert!(build_pattern(&[vec![1.0]], 0, 1).is_err());
        let vs = VerticalSlashPattern {
            layers: vec![vec![HeadPattern {
                vertical: vec![5],
                n_slash: 2,
            }]],
        };
        let ok: Vec<usize> = (0..10).filter(|&k| vs.allowed(0, 0, 9, k).unwrap()).collect();
        assert_eq!(ok, vec![5, 8, 9]);
        assert!(vs.allowed(0, 0, 3, 4).is_err());
        for q in 0..10 {
            assert!(vs.allowed(0, 0, q, q).unwrap());
        }
    }
}
