//! Attention-based importance scores over prompt keys and kept-set selection.
//!
//! Three families live here:
//!
//! * the reference score of a set of output rows against all inputs, and the
//!   centroid distance between target and draft output rows;
//! * per-KV-head window scores, where queries from the prompt's last
//!   `n_window` tokens (plus any lookahead tokens) attend to the early keys;
//! * a single global score aggregated over a draft's layers, heads and
//!   weighted query rows, used to drop prompt tokens.
//!
//! Window keys are never scored; selectors always keep them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecodeCapture, ForwardTrace, ModelConfig};
use crate::tensor::{arg_topk, avg_pool_1d, dot, l2_norm, max_pool_1d, softmax_in_place, vecmat_into, Tensor};

/// How per-query score rows collapse into one score per key.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    #[default]
    Max,
    Mean,
    /// Mean over layers and heads, then max over queries.
    MeanMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PerLayerHead,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub layer: Option<usize>,
    pub kv_head: Option<usize>,
    pub scores: Vec<f64>,
}

/// Scores over the early (non-window) keys of a prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub scope: Scope,
    pub rows: Vec<ScoreRow>,
    pub n_in: usize,
    pub n_window: usize,
    pub n_lookahead: usize,
}

impl ImportanceScores {
    /// Number of scored keys per row.
    pub fn key_count(&self) -> usize {
        self.n_in - self.n_window
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "head", "key_index", "score"])?;
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            for (i, s) in row.scores.iter().enumerate() {
                out.write_record([opt(row.layer), opt(row.kv_head), i.to_string(), format!("{s:.12e}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `s = mean_i softmax(x_i W_q W_kᵀ Xᵀ / sqrt(d))` with `d = X.cols()`.
pub fn oracle_importance(x_out: &Tensor, x: &Tensor, wq: &Tensor, wk: &Tensor) -> Result<Vec<f64>> {
    let d = x.cols();
    if x_out.rows() == 0 || x_out.shape().len() != 2 {
        return Err(Error::invalid("oracle_importance needs at least one output row"));
    }
    if x_out.cols() != d || wq.rows() != d || wk.rows() != d || wq.cols() != wk.cols() {
        return Err(Error::ShapeMismatch {
            op: "oracle_importance",
            left: [x_out.shape(), x.shape()].concat(),
            right: [wq.shape(), wk.shape()].concat(),
        });
    }
    let m = crate::tensor::matmul(wq, &wk.transpose())?;
    let n_in = x.rows();
    let scale = 1.0 / (d as f64).sqrt();
    let mut s = vec![0.0; n_in];
    let mut proj = vec![0.0; d];
    let mut row = vec![0.0; n_in];
    for i in 0..x_out.rows() {
        vecmat_into(x_out.row(i), &m, &mut proj);
        for (j, r) in row.iter_mut().enumerate() {
            *r = dot(&proj, x.row(j)) * scale;
        }
        softmax_in_place(&mut row);
        for (acc, p) in s.iter_mut().zip(&row) {
            *acc += p;
        }
    }
    let n = x_out.rows() as f64;
    s.iter_mut().for_each(|v| *v /= n);
    Ok(s)
}

/// Distance between the row means of two sets of hidden states.
pub fn epsilon_centroid(x_out: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x_out.rows() == 0 || x_hat.rows() == 0 {
        return Err(Error::invalid("epsilon_centroid needs nonempty inputs"));
    }
    if x_out.cols() != x_hat.cols() {
        return Err(Error::ShapeMismatch {
            op: "epsilon_centroid",
            left: x_out.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        });
    }
    let mean = |t: &Tensor| {
        let mut acc = vec![0.0; t.cols()];
        for i in 0..t.rows() {
            for (a, v) in acc.iter_mut().zip(t.row(i)) {
                *a += v;
            }
        }
        acc.into_iter().map(|v| v / t.rows() as f64).collect::<Vec<_>>()
    };
    let diff: Vec<f64> = mean(x_out).iter().zip(mean(x_hat)).map(|(a, b)| a - b).collect();
    Ok(l2_norm(&diff))
}

/// Head geometry needed to slice concatenated q/k rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

impl From<&ModelConfig> for HeadLayout {
    fn from(c: &ModelConfig) -> Self {
        Self {
            n_heads: c.n_heads,
            n_kv_heads: c.n_kv_heads,
            d_head: c.d_head,
        }
    }
}

/// For each query row: softmax over keys `0..m` per query head of `kv_head`'s
/// group, then the mean over the group.
pub fn group_attention_rows(queries: &[&[f64]], keys: &Tensor, m: usize, layout: HeadLayout, kv_head: usize) -> Vec<Vec<f64>> {
    let dh = layout.d_head;
    let group = layout.n_heads / layout.n_kv_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let inv_group = 1.0 / group as f64;
    queries
        .iter()
        .map(|q| {
            let mut acc = vec![0.0; m];
            let mut row = vec![0.0; m];
            for qh in kv_head * group..(kv_head + 1) * group {
                let qv = &q[qh * dh..(qh + 1) * dh];
                for (j, r) in row.iter_mut().enumerate() {
                    *r = dot(qv, &keys.row(j)[kv_head * dh..(kv_head + 1) * dh]) * scale;
                }
                softmax_in_place(&mut row);
                for (a, p) in acc.iter_mut().zip(&row) {
                    *a += p;
                }
            }
            acc.iter_mut().for_each(|a| *a *= inv_group);
            acc
        })
        .collect()
}

fn reduce_rows(rows: &[Vec<f64>], m: usize, reduce: Reduce) -> Vec<f64> {
    match reduce {
        Reduce::Max | Reduce::MeanMax => {
            let mut out = vec![f64::NEG_INFINITY; m];
            for r in rows {
                for (o, v) in out.iter_mut().zip(r) {
                    *o = o.max(*v);
                }
            }
            out
        }
        Reduce::Mean => {
            let mut out = vec![0.0; m];
            for r in rows {
                for (o, v) in out.iter_mut().zip(r) {
                    *o += v;
                }
            }
            let n = rows.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
            out
        }
    }
}

/// Per-head window scores for explicit query vectors.
///
/// `queries` are full rotated query rows (all heads concatenated); `keys`
/// holds at least `m` rotated key rows. Rows are group-averaged, reduced over
/// queries, then smoothed with an odd `kernel`.
pub fn window_scores(
    queries: &[&[f64]],
    keys: &Tensor,
    m: usize,
    layout: HeadLayout,
    kv_head: usize,
    kernel: usize,
    reduce: Reduce,
) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::invalid("window scoring needs at least one query"));
    }
    if m == 0 || m > keys.rows() {
        return Err(Error::invalid(format!("cannot score {m} early keys out of {}", keys.rows())));
    }
    let rows = group_attention_rows(queries, keys, m, layout, kv_head);
    avg_pool_1d(&reduce_rows(&rows, m, reduce), kernel)
}

/// Window and lookahead queries from one prefill over `prompt ++ lookahead`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowParams {
    pub n_in: usize,
    pub n_window: usize,
    pub kernel: usize,
    pub reduce: Reduce,
}

impl WindowParams {
    fn check(&self, rows: usize) -> Result<usize> {
        if self.n_window >= self.n_in {
            return Err(Error::invalid(format!(
                "n_window {} must be below n_in {}",
                self.n_window, self.n_in
            )));
        }
        if self.n_window == 0 && rows == self.n_in {
            return Err(Error::invalid("no window or lookahead queries to score with"));
        }
        if rows < self.n_in {
            return Err(Error::invalid(format!("trace has {rows} rows, fewer than n_in {}", self.n_in)));
        }
        Ok(self.n_in - self.n_window)
    }
}

/// Scores of one layer's KV head from that layer's rotated `q` and `k`, where
/// rows `n_in..` are lookahead tokens appended after the prompt.
pub fn layer_window_scores(q: &Tensor, k: &Tensor, layout: HeadLayout, kv_head: usize, p: WindowParams) -> Result<Vec<f64>> {
    let m = p.check(q.rows())?;
    let queries: Vec<&[f64]> = (m..q.rows()).map(|i| q.row(i)).collect();
    window_scores(&queries, k, m, layout, kv_head, p.kernel, p.reduce)
}

/// [`layer_window_scores`] read from a trace.
pub fn speckv_head_scores(trace: &ForwardTrace, layout: HeadLayout, layer: usize, kv_head: usize, p: WindowParams) -> Result<Vec<f64>> {
    let lt = trace
        .layers
        .get(layer)
        .ok_or(Error::OutOfRange { index: layer, len: trace.layers.len() })?;
    layer_window_scores(&lt.q, &lt.k, layout, kv_head, p)
}

/// Cumulative attention each early key receives from every prompt query,
/// group-averaged per KV head. Needs a trace with attention maps.
pub fn h2o_head_scores(trace: &ForwardTrace, layout: HeadLayout, layer: usize, kv_head: usize, n_in: usize, n_window: usize) -> Result<Vec<f64>> {
    let maps = trace.layers[layer]
        .attention
        .as_ref()
        .ok_or_else(|| Error::invalid("H2O scoring needs captured attention maps"))?;
    if n_window >= n_in || n_in > trace.len() {
        return Err(Error::invalid("H2O needs n_window < n_in <= trace length"));
    }
    let m = n_in - n_window;
    let group = layout.n_heads / layout.n_kv_heads;
    let mut out = vec![0.0; m];
    for qh in kv_head * group..(kv_head + 1) * group {
        let a = &maps[qh];
        for i in 0..n_in {
            for (o, v) in out.iter_mut().zip(&a.row(i)[..m]) {
                *o += v;
            }
        }
    }
    out.iter_mut().for_each(|o| *o /= group as f64);
    Ok(out)
}

/// Parameters of the global prompt-token score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptScoreParams {
    pub n_in: usize,
    pub n_window: usize,
    pub kernel: usize,
    pub n_neighbor: usize,
    pub l_skip: usize,
    pub reduce: Reduce,
}

/// Stack a draft's attention into `[n_layer, n_head, rows, n_in]`: the prompt
/// rows from the prefill trace followed by the first `extra` captured decode
/// rows, truncated to the prompt's key columns.
pub fn assemble_attention(trace: &ForwardTrace, capture: Option<&DecodeCapture>, n_in: usize, extra: usize) -> Result<Tensor> {
    let n_layer = trace.layers.len();
    let first = trace.layers[0]
        .attention
        .as_ref()
        .ok_or_else(|| Error::invalid("draft trace lacks attention maps"))?;
    let n_head = first.len();
    if extra > capture.map_or(0, |c| c.steps) {
        return Err(Error::invalid("decode capture has fewer steps than requested rows"));
    }
    let rows = n_in + extra;
    let mut data = Vec::with_capacity(n_layer * n_head * rows * n_in);
    for l in 0..n_layer {
        let maps = trace.layers[l].attention.as_ref().ok_or_else(|| Error::invalid("missing attention map"))?;
        for h in 0..n_head {
            for i in 0..n_in {
                data.extend_from_slice(&maps[h].row(i)[..n_in]);
            }
            if let Some(c) = capture.filter(|_| extra > 0) {
                if c.attention.len() != n_layer || c.attention[l][h].len() < extra {
                    return Err(Error::invalid("decode capture lacks attention rows"));
                }
                for r in &c.attention[l][h][..extra] {
                    data.extend_from_slice(&r[..n_in]);
                }
            }
        }
    }
    Tensor::new(vec![n_layer, n_head, rows, n_in], data)
}

/// Global prompt-token scores over the first `n_in - n_window` keys.
///
/// `attn` is `[n_layer, n_head, rows, n_in]` with rows `n_in..` coming from
/// lookahead steps. Layers below `l_skip` are ignored. The j-th window query
/// (j = 1 oldest) is weighted `j / n_window`; lookahead queries weigh 1.
pub fn specpc_scores(attn: &Tensor, p: PromptScoreParams) -> Result<Vec<f64>> {
    let sh = attn.shape();
    if sh.len() != 4 || sh[3] != p.n_in || sh[2] < p.n_in {
        return Err(Error::ShapeMismatch {
            op: "specpc_scores",
            left: sh.to_vec(),
            right: vec![p.n_in],
        });
    }
    let (n_layer, n_head, rows) = (sh[0], sh[1], sh[2]);
    if p.l_skip >= n_layer {
        return Err(Error::invalid(format!("l_skip {} must be below n_layer {n_layer}", p.l_skip)));
    }
    if p.n_window >= p.n_in || p.n_window == 0 {
        return Err(Error::invalid(format!("n_window {} must be in 1..n_in ({})", p.n_window, p.n_in)));
    }
    let m = p.n_in - p.n_window;
    let first_q = m;
    let weight = |r: usize| {
        if r < p.n_in {
            (r - first_q + 1) as f64 / p.n_window as f64
        } else {
            1.0
        }
    };
    let row = |l: usize, h: usize, r: usize| {
        let off = ((l * n_head + h) * rows + r) * p.n_in;
        &attn.data()[off..off + m]
    };
    let mut s = vec![f64::NEG_INFINITY; m];
    match p.reduce {
        Reduce::Max => {
            for l in p.l_skip..n_layer {
                for h in 0..n_head {
                    for r in first_q..rows {
                        let w = weight(r);
                        for (o, v) in s.iter_mut().zip(row(l, h, r)) {
                            *o = o.max(w * v);
                        }
                    }
                }
            }
        }
        Reduce::Mean | Reduce::MeanMax => {
            let count = ((n_layer - p.l_skip) * n_head) as f64;
            for r in first_q..rows {
                let mut mean = vec![0.0; m];
                for l in p.l_skip..n_layer {
                    for h in 0..n_head {
                        for (a, v) in mean.iter_mut().zip(row(l, h, r)) {
                            *a += v;
                        }
                    }
                }
                let w = weight(r) / count;
                for (o, a) in s.iter_mut().zip(&mean) {
                    *o = o.max(w * a);
                }
            }
        }
    }
    let pooled = avg_pool_1d(&s, p.kernel)?;
    max_pool_1d(&pooled, p.n_neighbor)
}

/// Top `c_max - n_window` early keys by score, plus every window key.
pub fn select_kv_indices(scores: &[f64], c_max: usize, n_window: usize, n_in: usize) -> Result<Vec<usize>> {
    if c_max < n_window {
        return Err(Error::Budget(format!("C_max {c_max} is below n_window {n_window}")));
    }
    if c_max >= n_in {
        return Ok((0..n_in).collect());
    }
    let m = n_in - n_window;
    if scores.len() < m {
        return Err(Error::invalid(format!("{} scores for {m} early keys", scores.len())));
    }
    let mut keep = arg_topk(&scores[..m], c_max - n_window);
    keep.extend(m..n_in);
    Ok(keep)
}

/// Prompt positions to retain; same rule as [`select_kv_indices`].
pub fn select_prompt_tokens(scores: &[f64], c_max: usize, n_window: usize, n_in: usize) -> Result<Vec<usize>> {
    select_kv_indices(scores, c_max, n_window, n_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_single_key() {
        let x = Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let w = Tensor::identity(2);
        assert_eq!(oracle_importance(&x, &x, &w, &w).unwrap(), vec![1.0]);
    }

    #[test]
    fn epsilon_shift() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let shifted = Tensor::from_rows(&[vec![4.0, 6.0], vec![6.0, 8.0]]).unwrap();
        assert_eq!(epsilon_centroid(&x, &x).unwrap(), 0.0);
        assert!((epsilon_centroid(&x, &shifted).unwrap() - 5.0).abs() < 1e-12);
        assert!(epsilon_centroid(&x, &Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_kv_indices(&[0.1, 0.9, 0.3, 0.2], 4, 2, 6).unwrap(), vec![1, 2, 4, 5]);
        assert_eq!(select_kv_indices(&[0.0; 4], 9, 2, 6).unwrap(), (0..6).collect::<Vec<_>>());
        assert_eq!(select_kv_indices(&[0.5; 4], 2, 2, 6).unwrap(), vec![4, 5]);
        assert_eq!(select_prompt_tokens(&[0.0; 4], 4, 2, 6).unwrap(), vec![0, 1, 4, 5]);
        assert!(matches!(select_kv_indices(&[0.0; 4], 1, 2, 6), Err(Error::Budget(_))));
    }

    #[test]
    fn specpc_single_row_degenerate() {
        // one layer, one head, n_in = 3, window 1: the last prompt row is the
        // only query and carries weight 1
        let rows = [[1.0, 0.0, 0.0], [0.4, 0.6, 0.0], [0.2, 0.3, 0.5]];
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let a = Tensor::new(vec![1, 1, 3, 3], data).unwrap();
        let p = PromptScoreParams {
            n_in: 3,
            n_window: 1,
            kernel: 1,
            n_neighbor: 1,
            l_skip: 0,
            reduce: Reduce::Max,
        };
        assert_eq!(specpc_scores(&a, p).unwrap(), vec![0.2, 0.3]);
        assert!(specpc_scores(&a, PromptScoreParams { l_skip: 1, ..p }).is_err());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let s = ImportanceScores {
            scope: Scope::Global,
            rows: vec![ScoreRow {
                layer: None,
                kv_head: None,
                scores: vec![0.5, 0.25],
            }],
            n_in: 4,
            n_window: 2,
            n_lookahead: 1,
        };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,head,key_index,score\n,,0,"));
        assert_eq!(text.lines().count(), 3);
    }
}
