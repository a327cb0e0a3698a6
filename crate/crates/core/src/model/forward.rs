use crate::error::{Error, Result};
use crate::kv_cache::KVCache;
use crate::tensor::{argmax, dot, matmul, softmax_in_place, vecmat_into, Tensor};

use super::Model;

/// Sparsity pattern for one KV head: key `k` is visible to query `q` iff
/// `k <= q` and (`vertical[k]` or `q - k < n_slash`).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMask {
    pub vertical: Vec<bool>,
    pub n_slash: usize,
}

impl HeadMask {
    pub fn full(n: usize) -> Self {
        Self {
            vertical: vec![true; n],
            n_slash: n.max(1),
        }
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        k <= q && (q - k < self.n_slash || self.vertical.get(k).copied().unwrap_or(false))
    }
}

/// One mask per KV head; every query head in a group shares its KV head's mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMask {
    pub heads: Vec<HeadMask>,
}

/// Supplies an attention mask per layer during prefill.
///
/// The hook runs after the layer's queries and keys are projected and
/// rotated, before any softmax, so a mask may depend on that same layer's
/// `q` (`n × n_heads·d_head`) and `k` (`n × n_kv_heads·d_head`).
pub trait MaskSource {
    fn layer_mask(&mut self, layer: usize, q: &Tensor, k: &Tensor) -> Result<Option<LayerMask>>;
}

/// Hands out a fixed mask for every layer.
impl MaskSource for LayerMask {
    fn layer_mask(&mut self, _layer: usize, _q: &Tensor, _k: &Tensor) -> Result<Option<LayerMask>> {
        Ok(Some(self.clone()))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PrefillOptions {
    /// Keep every head's full attention map in the trace.
    pub capture_attention: bool,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Residual stream entering the layer, `n × d_model`.
    pub hidden: Tensor,
    /// Rotated queries, `n × n_heads·d_head`.
    pub q: Tensor,
    /// Rotated keys, `n × n_kv_heads·d_head`.
    pub k: Tensor,
    pub v: Tensor,
    /// Per query head, `n × n` with zeros above the diagonal.
    pub attention: Option<Vec<Tensor>>,
    /// q·k products evaluated, per query head.
    pub score_ops: Vec<u64>,
    pub mask: Option<LayerMask>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTrace>,
    /// Residual stream after the last layer, before the final norm.
    pub final_hidden: Tensor,
    /// `n × vocab`
    pub logits: Tensor,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }

    /// Total q·k products over all layers and heads.
    pub fn total_score_ops(&self) -> u64 {
        self.layers.iter().flat_map(|l| &l.score_ops).sum()
    }
}

pub(crate) fn rms_norm_into(x: &[f64], g: &[f64], eps: f64, out: &mut [f64]) {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, xv), gv) in out.iter_mut().zip(x).zip(g) {
        *o = xv * inv * gv;
    }
}

fn rms_norm_rows(x: &Tensor, g: &[f64], eps: f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        rms_norm_into(x.row(i), g, eps, out.row_mut(i));
    }
    out
}

/// Rotate interleaved pairs of the first `rope_dims` dims of every head.
fn apply_rope(v: &mut [f64], n_heads: usize, d_head: usize, rope_dims: usize, base: f64, pos: usize) {
    if rope_dims == 0 {
        return;
    }
    for i in 0..rope_dims / 2 {
        let freq = base.powf(-2.0 * i as f64 / rope_dims as f64);
        let (s, c) = (pos as f64 * freq).sin_cos();
        for h in 0..n_heads {
            let o = h * d_head + 2 * i;
            let (a, b) = (v[o], v[o + 1]);
            v[o] = a * c - b * s;
            v[o + 1] = a * s + b * c;
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn embed_into(model: &Model, token: u32, position: usize, out: &mut [f64]) {
    out.copy_from_slice(model.embed.row(token as usize));
    if let Some(p) = &model.pos_embed {
        for (o, v) in out.iter_mut().zip(p.row(position)) {
            *o += v;
        }
    }
}

fn mlp_residual(model: &Model, layer: usize, x: &mut [f64]) {
    let c = &model.config;
    let w = &model.layers[layer];
    let mut h = vec![0.0; c.d_model];
    rms_norm_into(x, &w.mlp_norm, c.norm_eps, &mut h);
    let mut g = vec![0.0; c.d_mlp];
    let mut u = vec![0.0; c.d_mlp];
    vecmat_into(&h, &w.w_gate, &mut g);
    vecmat_into(&h, &w.w_up, &mut u);
    let a: Vec<f64> = g.iter().zip(&u).map(|(g, u)| silu(*g) * u).collect();
    let mut out = vec![0.0; c.d_model];
    vecmat_into(&a, &w.w_down, &mut out);
    for (xv, o) in x.iter_mut().zip(&out) {
        *xv += o;
    }
}

pub fn forward_prefill(model: &Model, tokens: &[u32], opts: PrefillOptions) -> Result<ForwardTrace> {
    forward_prefill_with(model, tokens, opts, None)
}

/// Prefill with an optional per-layer mask hook.
pub fn forward_prefill_with(
    model: &Model,
    tokens: &[u32],
    opts: PrefillOptions,
    mut masks: Option<&mut dyn MaskSource>,
) -> Result<ForwardTrace> {
    model.check_tokens(tokens)?;
    if tokens.is_empty() {
        return Err(Error::invalid("prefill needs at least one token"));
    }
    let c = &model.config;
    let n = tokens.len();
    let (dh, group) = (c.d_head, c.group_size());
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Tensor::zeros(&[n, c.d_model]);
    for (i, &t) in tokens.iter().enumerate() {
        embed_into(model, t, i, x.row_mut(i));
    }

    let mut layers = Vec::with_capacity(c.n_layers);
    for (l, w) in model.layers.iter().enumerate() {
        let h = rms_norm_rows(&x, &w.attn_norm, c.norm_eps);
        let mut q = matmul(&h, &w.wq)?;
        let mut k = matmul(&h, &w.wk)?;
        let v = matmul(&h, &w.wv)?;
        for i in 0..n {
            apply_rope(q.row_mut(i), c.n_heads, dh, c.rope_dims(), c.rope_base, i);
            apply_rope(k.row_mut(i), c.n_kv_heads, dh, c.rope_dims(), c.rope_base, i);
        }
        let mask = match masks.as_deref_mut() {
            Some(src) => src.layer_mask(l, &q, &k)?,
            None => None,
        };
        if let Some(m) = &mask {
            if m.heads.len() != c.n_kv_heads {
                return Err(Error::ShapeMismatch {
                    op: "layer mask",
                    left: vec![m.heads.len()],
                    right: vec![c.n_kv_heads],
                });
            }
        }

        let mut attn_out = Tensor::zeros(&[n, c.q_width()]);
        let mut maps = opts.capture_attention.then(Vec::new);
        let mut score_ops = vec![0u64; c.n_heads];
        let mut row = vec![0.0; n];
        let mut allowed = vec![false; n];
        for qh in 0..c.n_heads {
            let kvh = qh / group;
            let head_mask = mask.as_ref().map(|m| &m.heads[kvh]);
            let mut map = maps.as_ref().map(|_| Tensor::zeros(&[n, n]));
            for i in 0..n {
                let qi = &q.row(i)[qh * dh..(qh + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    allowed[j] = head_mask.is_none_or(|m| m.allows(i, j));
                    if allowed[j] {
                        let s = dot(qi, &k.row(j)[kvh * dh..(kvh + 1) * dh]) * scale;
                        row[j] = s;
                        max = max.max(s);
                        score_ops[qh] += 1;
                    }
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    if allowed[j] {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    } else {
                        row[j] = 0.0;
                    }
                }
                let out = &mut attn_out.row_mut(i)[qh * dh..(qh + 1) * dh];
                for j in 0..=i {
                    if row[j] == 0.0 {
                        continue;
                    }
                    row[j] /= sum;
                    let vj = &v.row(j)[kvh * dh..(kvh + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += row[j] * vv;
                    }
                }
                if let Some(map) = map.as_mut() {
                    map.row_mut(i)[..=i].copy_from_slice(&row[..=i]);
                }
            }
            if let (Some(maps), Some(map)) = (maps.as_mut(), map) {
                maps.push(map);
            }
        }
        let hidden = x.clone();
        let o = matmul(&attn_out, &w.wo)?;
        for (xv, ov) in x.data_mut().iter_mut().zip(o.data()) {
            *xv += ov;
        }
        for i in 0..n {
            mlp_residual(model, l, x.row_mut(i));
        }
        layers.push(LayerTrace {
            hidden,
            q,
            k,
            v,
            attention: maps,
            score_ops,
            mask,
        });
    }
    let normed = rms_norm_rows(&x, &model.final_norm, c.norm_eps);
    let logits = matmul(&normed, &model.unembed)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("prefill logits"));
    }
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        layers,
        final_hidden: x,
        logits,
    })
}

/// Per-step records from decoding, indexed `[layer][step]`.
#[derive(Clone, Debug, Default)]
pub struct DecodeCapture {
    pub capture_attention: bool,
    /// Residual stream entering each layer.
    pub hidden: Vec<Vec<Vec<f64>>>,
    /// Rotated query vectors, all heads concatenated.
    pub q: Vec<Vec<Vec<f64>>>,
    /// `[layer][query_head][step]`, each row over that step's cache entries.
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
    pub steps: usize,
}

impl DecodeCapture {
    pub fn new(capture_attention: bool) -> Self {
        Self {
            capture_attention,
            ..Self::default()
        }
    }
}

/// Run one token through the model against (and into) `cache`.
/// Returns the next-token logits.
pub fn decode_step(
    model: &Model,
    cache: &mut KVCache,
    token: u32,
    position: usize,
    mut capture: Option<&mut DecodeCapture>,
) -> Result<Vec<f64>> {
    let c = &model.config;
    model.check_tokens(&[token])?;
    if position >= c.max_positions {
        return Err(Error::LengthOverflow {
            len: position + 1,
            max: c.max_positions,
        });
    }
    if cache.n_layers() != c.n_layers || cache.n_kv_heads() != c.n_kv_heads || cache.d_head() != c.d_head {
        return Err(Error::ShapeMismatch {
            op: "decode cache",
            left: vec![cache.n_layers(), cache.n_kv_heads(), cache.d_head()],
            right: vec![c.n_layers, c.n_kv_heads, c.d_head],
        });
    }
    if let Some(cap) = capture.as_deref_mut() {
        if cap.hidden.is_empty() {
            cap.hidden = vec![Vec::new(); c.n_layers];
            cap.q = vec![Vec::new(); c.n_layers];
            cap.attention = vec![vec![Vec::new(); c.n_heads]; c.n_layers];
        }
        cap.steps += 1;
    }
    let (dh, group) = (c.d_head, c.group_size());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = vec![0.0; c.d_model];
    embed_into(model, token, position, &mut x);
    let mut h = vec![0.0; c.d_model];
    let mut q = vec![0.0; c.q_width()];
    let mut k = vec![0.0; c.kv_width()];
    let mut v = vec![0.0; c.kv_width()];
    let mut ops = 0u64;
    for (l, w) in model.layers.iter().enumerate() {
        rms_norm_into(&x, &w.attn_norm, c.norm_eps, &mut h);
        vecmat_into(&h, &w.wq, &mut q);
        vecmat_into(&h, &w.wk, &mut k);
        vecmat_into(&h, &w.wv, &mut v);
        apply_rope(&mut q, c.n_heads, dh, c.rope_dims(), c.rope_base, position);
        apply_rope(&mut k, c.n_kv_heads, dh, c.rope_dims(), c.rope_base, position);
        for kvh in 0..c.n_kv_heads {
            cache.append(l, kvh, &k[kvh * dh..(kvh + 1) * dh], &v[kvh * dh..(kvh + 1) * dh], position)?;
        }
        let mut attn_out = vec![0.0; c.q_width()];
        for qh in 0..c.n_heads {
            let kvh = qh / group;
            let keys = cache.keys(l, kvh);
            let vals = cache.values(l, kvh);
            let len = keys.len() / dh;
            let qv = &q[qh * dh..(qh + 1) * dh];
            let mut row: Vec<f64> = (0..len).map(|j| dot(qv, &keys[j * dh..(j + 1) * dh]) * scale).collect();
            ops += len as u64;
            softmax_in_place(&mut row);
            let out = &mut attn_out[qh * dh..(qh + 1) * dh];
            for (j, p) in row.iter().enumerate() {
                for (o, vv) in out.iter_mut().zip(&vals[j * dh..(j + 1) * dh]) {
                    *o += p * vv;
                }
            }
            if let Some(cap) = capture.as_deref_mut() {
                if cap.capture_attention {
                    cap.attention[l][qh].push(row);
                }
            }
        }
        if let Some(cap) = capture.as_deref_mut() {
            cap.hidden[l].push(x.clone());
            cap.q[l].push(q.clone());
        }
        let mut o = vec![0.0; c.d_model];
        vecmat_into(&attn_out, &w.wo, &mut o);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }
        mlp_residual(model, l, &mut x);
    }
    cache.record_decode_step(ops);
    rms_norm_into(&x.clone(), &model.final_norm, c.norm_eps, &mut h);
    let mut logits = vec![0.0; c.vocab_size];
    vecmat_into(&h, &model.unembed, &mut logits);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decode logits"));
    }
    Ok(logits)
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    pub max_new: usize,
    pub stop: Option<u32>,
    /// Also run the final emitted token through the model, so captures cover
    /// every output token. Off by default since its logits are unused.
    pub feed_last: bool,
}

impl DecodeOptions {
    pub fn new(max_new: usize, stop: Option<u32>) -> Self {
        Self {
            max_new,
            stop,
            feed_last: false,
        }
    }
}

/// Greedy argmax loop. The first token comes from `first_logits` (normally the
/// last prefill row); later ones are decoded at `start_position`, `+1`, ...
/// Ties go to the lowest token id.
pub fn decode_greedy(
    model: &Model,
    cache: &mut KVCache,
    first_logits: &[f64],
    start_position: usize,
    opts: DecodeOptions,
    mut capture: Option<&mut DecodeCapture>,
) -> Result<Vec<u32>> {
    if first_logits.len() != model.config.vocab_size {
        return Err(Error::ShapeMismatch {
            op: "decode_greedy logits",
            left: vec![first_logits.len()],
            right: vec![model.config.vocab_size],
        });
    }
    let mut out = Vec::with_capacity(opts.max_new);
    let mut logits = first_logits.to_vec();
    let mut pos = start_position;
    while out.len() < opts.max_new {
        let t = argmax(&logits) as u32;
        out.push(t);
        let done = opts.stop == Some(t) || out.len() == opts.max_new;
        if done && !opts.feed_last {
            break;
        }
        logits = decode_step(model, cache, t, pos, capture.as_deref_mut())?;
        pos += 1;
        if done {
            break;
        }
    }
    Ok(out)
}
