use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::importance::{
    assemble_attention, epsilon_centroid, h2o_head_scores, layer_window_scores, select_kv_indices, select_prompt_tokens,
    specpc_scores, window_scores, HeadLayout, ImportanceScores, PromptScoreParams, Reduce, Scope, ScoreRow, WindowParams,
};
use crate::kv_cache::{CostCounters, KVCache};
use crate::model::{
    decode_greedy, derive_draft, forward_prefill, forward_prefill_with, DecodeCapture, DecodeOptions, ForwardTrace, Model,
    PrefillOptions,
};
use crate::sparse_prefill::LookaheadMaskSource;
use crate::tensor::Tensor;

use super::{
    scaled, scaled_odd, LaqConfig, PolicyConfig, PromptCompressionConfig, SnapKvConfig, SpecKvConfig,
};

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub policy: String,
    pub output: Vec<u32>,
    /// Prompt positions the target saw (prompt-compression policies).
    pub kept_prompt: Option<Vec<usize>>,
    /// Kept prompt positions per `[layer * n_kv_heads + kv_head]` after
    /// prefill (KV-dropping policies), in original prompt coordinates.
    pub kept_kv: Option<Vec<Vec<usize>>>,
    /// `kv_bytes_peak` is the analytic prefill-phase footprint; the other
    /// counters are measured on the target.
    pub costs: CostCounters,
    /// q·k products spent inside the draft model.
    pub draft_ops: u64,
    /// Ops of each target decode step, summed over layers and heads.
    pub decode_step_ops: Vec<u64>,
    /// Centroid distance between draft lookahead and target output states.
    pub epsilon: Option<f64>,
    pub draft: Option<String>,
    pub lookahead: Vec<u32>,
    /// Every parameter the run actually used, after default scaling.
    pub resolved: Value,
    /// Informational only; never compared.
    pub wall_time_ms: f64,
    #[serde(skip)]
    pub importance: Option<ImportanceScores>,
}

/// Dense target run that feeds every output token, kept to measure how far a
/// draft's lookahead states are from the target's.
#[derive(Clone, Debug)]
pub struct Reference {
    pub output: Vec<u32>,
    /// Per layer, `n_out × d_model` residual states entering that layer.
    pub hidden: Vec<Tensor>,
}

impl Reference {
    pub fn compute(target: &Model, prompt: &[u32], max_new: usize, stop: Option<u32>) -> Result<Self> {
        let trace = forward_prefill(target, prompt, PrefillOptions::default())?;
        let mut cache = KVCache::from_trace(&trace, target.config(), prompt.len())?;
        let mut cap = DecodeCapture::new(false);
        let opts = DecodeOptions {
            max_new,
            stop,
            feed_last: true,
        };
        let output = decode_greedy(target, &mut cache, trace.last_logits(), prompt.len(), opts, Some(&mut cap))?;
        Ok(Self {
            output,
            hidden: stack_hidden(&cap),
        })
    }
}

fn stack_hidden(cap: &DecodeCapture) -> Vec<Tensor> {
    cap.hidden
        .iter()
        .map(|rows| {
            let d = rows.first().map_or(0, Vec::len);
            Tensor::matrix(rows.len(), d, rows.concat()).expect("rows share a width")
        })
        .collect()
}

/// Mean over shared layers of the centroid distance.
fn epsilon(reference: &Reference, draft_hidden: &[Tensor]) -> Result<Option<f64>> {
    let layers = reference.hidden.len().min(draft_hidden.len());
    if layers == 0 || reference.hidden[0].rows() == 0 || draft_hidden[0].rows() == 0 {
        return Ok(None);
    }
    let mut acc = 0.0;
    for l in 0..layers {
        acc += epsilon_centroid(&reference.hidden[l], &draft_hidden[l])?;
    }
    Ok(Some(acc / layers as f64))
}

/// A policy bound to a target model, with its draft derived once.
pub struct Pipeline<'a> {
    target: &'a Model,
    policy: PolicyConfig,
    draft: Option<Model>,
    measure_epsilon: bool,
}

impl<'a> Pipeline<'a> {
    pub fn new(target: &'a Model, policy: PolicyConfig) -> Result<Self> {
        let draft = match policy.draft() {
            Some(spec) => Some(derive_draft(target, spec.mode, spec.seed)?),
            None => None,
        };
        Ok(Self {
            target,
            policy,
            draft,
            measure_epsilon: true,
        })
    }

    /// Skip the extra dense reference run used for the epsilon measurement.
    pub fn without_epsilon(mut self) -> Self {
        self.measure_epsilon = false;
        self
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn draft_model(&self) -> Option<&Model> {
        self.draft.as_ref()
    }

    pub fn run(&self, prompt: &[u32], max_new: usize, stop: Option<u32>) -> Result<RunResult> {
        let reference = if self.draft.is_some() && self.measure_epsilon && max_new > 0 {
            Some(Reference::compute(self.target, prompt, max_new, stop)?)
        } else {
            None
        };
        self.run_with_reference(prompt, max_new, stop, reference.as_ref())
    }

    /// Like [`Pipeline::run`] with a precomputed (shareable) reference.
    pub fn run_with_reference(&self, prompt: &[u32], max_new: usize, stop: Option<u32>, reference: Option<&Reference>) -> Result<RunResult> {
        let start = Instant::now();
        self.target.check_tokens(prompt)?;
        if prompt.is_empty() {
            return Err(Error::invalid("prompt is empty"));
        }
        let ctx = Ctx {
            target: self.target,
            draft: self.draft.as_ref(),
            prompt,
            max_new,
            stop,
            reference,
        };
        let mut r = match &self.policy {
            PolicyConfig::Dense => ctx.dense(),
            PolicyConfig::StreamingLlm(c) => ctx.streaming(c.n_sink, c.n_window),
            PolicyConfig::H2o(c) => ctx.h2o(c.c_max, c.n_window),
            PolicyConfig::SnapKv(c) => ctx.snapkv(c),
            PolicyConfig::SpecKv(c) => ctx.speckv(c),
            PolicyConfig::LaqPp(c) => ctx.laqpp(c),
            PolicyConfig::SpecPc(c) => ctx.prompt_compression(c, PcDefaults::SPECPC, None),
            PolicyConfig::SpecPrefill(c) => ctx.prompt_compression(c, PcDefaults::SPECPREFILL, None),
            PolicyConfig::SpecKvPc(c) => ctx.prompt_compression(&c.pc, PcDefaults::SPECPC, Some(&c.kv)),
        }?;
        r.policy = self.policy.name().to_string();
        r.draft = self.policy.draft().map(|d| d.mode.label());
        r.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(r)
    }
}

/// One-shot convenience wrapper around [`Pipeline`].
pub fn run_pipeline(target: &Model, policy: &PolicyConfig, prompt: &[u32], max_new: usize, stop: Option<u32>) -> Result<RunResult> {
    Pipeline::new(target, policy.clone())?.run(prompt, max_new, stop)
}

struct Ctx<'a> {
    target: &'a Model,
    draft: Option<&'a Model>,
    prompt: &'a [u32],
    max_new: usize,
    stop: Option<u32>,
    reference: Option<&'a Reference>,
}

#[derive(Clone, Copy)]
struct PcDefaults {
    n_window: usize,
    kernel: usize,
    n_neighbor: usize,
    l_skip: usize,
    n_lookahead: usize,
    reduce: Reduce,
}

impl PcDefaults {
    const SPECPC: Self = Self {
        n_window: 64,
        kernel: 64,
        n_neighbor: 64,
        l_skip: 8,
        n_lookahead: 1,
        reduce: Reduce::Max,
    };
    const SPECPREFILL: Self = Self {
        n_window: 1,
        kernel: 13,
        n_neighbor: 32,
        l_skip: 0,
        n_lookahead: 8,
        reduce: Reduce::MeanMax,
    };
}

#[derive(Serialize)]
struct ResolvedWindow {
    c_max: usize,
    n_window: usize,
    kernel: usize,
    reduce: Reduce,
}

#[derive(Serialize)]
struct ResolvedSpecKv {
    c_max: usize,
    n_window: usize,
    kernel: usize,
    reduce: Reduce,
    n_lookahead: usize,
    n_vert: usize,
    n_slash: usize,
    sparse_prefill: bool,
}

impl ResolvedSpecKv {
    fn new(c: &SpecKvConfig, n_in: usize, max_new: usize) -> Self {
        Self {
            c_max: c.c_max,
            n_window: scaled(c.n_window, 32, n_in),
            kernel: scaled_odd(c.kernel, 7, n_in),
            reduce: c.reduce.unwrap_or(Reduce::Max),
            n_lookahead: c.n_lookahead.unwrap_or(max_new),
            n_vert: scaled(c.n_vert, 2048, n_in),
            n_slash: scaled(c.n_slash, 2048, n_in),
            sparse_prefill: c.sparse_prefill,
        }
    }
}

#[derive(Serialize)]
struct ResolvedPc {
    c_max: usize,
    n_window: usize,
    kernel: usize,
    n_neighbor: usize,
    l_skip: usize,
    n_lookahead: usize,
    reduce: Reduce,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn check_window(c_max: usize, n_window: usize, n_in: usize) -> Result<()> {
    if c_max < n_window {
        return Err(Error::Budget(format!("C_max {c_max} is below n_window {n_window}")));
    }
    if n_window >= n_in {
        return Err(Error::Budget(format!("n_window {n_window} must be below prompt length {n_in}")));
    }
    Ok(())
}

/// Entries held at peak when each layer's full prefill KV is dropped to
/// `kept` before the next layer runs.
fn streamed_peak_entries(n_layers: usize, n_kv: usize, n_prefill: usize, kept: usize) -> u64 {
    (n_kv * (n_prefill + (n_layers - 1) * kept)) as u64
}

fn full_peak_entries(n_layers: usize, n_kv: usize, n: usize) -> u64 {
    (n_layers * n_kv * n) as u64
}

impl Ctx<'_> {
    fn layout(&self) -> HeadLayout {
        HeadLayout::from(self.target.config())
    }

    fn n_in(&self) -> usize {
        self.prompt.len()
    }

    fn check_room(&self, model: &Model, len: usize) -> Result<()> {
        let max = model.config().max_positions;
        if len > max {
            return Err(Error::LengthOverflow { len, max });
        }
        Ok(())
    }

    fn decode(&self, cache: &mut KVCache, first_logits: &[f64], start: usize) -> Result<Vec<u32>> {
        decode_greedy(self.target, cache, first_logits, start, DecodeOptions::new(self.max_new, self.stop), None)
    }

    fn finish(
        &self,
        mut cache: KVCache,
        first_logits: &[f64],
        start: usize,
        peak_entries: u64,
        extra_prefill_ops: u64,
    ) -> Result<RunResult> {
        cache.record_prefill_ops(extra_prefill_ops);
        let output = self.decode(&mut cache, first_logits, start)?;
        let mut costs = cache.snapshot_costs();
        costs.kv_bytes_peak = cache.bytes_for_entries(peak_entries);
        Ok(RunResult {
            policy: String::new(),
            output,
            kept_prompt: None,
            kept_kv: None,
            costs,
            draft_ops: 0,
            decode_step_ops: cache.decode_step_ops().to_vec(),
            epsilon: None,
            draft: None,
            lookahead: Vec::new(),
            resolved: Value::Null,
            wall_time_ms: 0.0,
            importance: None,
        })
    }

    /// Cache holding only `kept[slot]` rows of a prompt trace; ops of the
    /// trace are booked as prefill work.
    fn kept_cache(&self, trace: &ForwardTrace, n_in: usize, kept: &[Vec<usize>]) -> Result<KVCache> {
        let c = self.target.config();
        let mut cache = KVCache::from_trace(trace, c, n_in)?;
        for l in 0..c.n_layers {
            for h in 0..c.n_kv_heads {
                cache.evict_keep(l, h, &kept[l * c.n_kv_heads + h])?;
            }
        }
        let widest = kept.iter().map(Vec::len).max().unwrap_or(0);
        Ok(cache.with_capacity(Some(widest + self.max_new)))
    }

    fn dense(&self) -> Result<RunResult> {
        let n = self.n_in();
        self.check_room(self.target, n + self.max_new.saturating_sub(1))?;
        let trace = forward_prefill(self.target, self.prompt, PrefillOptions::default())?;
        let cache = KVCache::from_trace(&trace, self.target.config(), n)?;
        let c = self.target.config();
        self.finish(cache, trace.last_logits(), n, full_peak_entries(c.n_layers, c.n_kv_heads, n), 0)
    }

    fn drop_after_prefill(&self, trace: &ForwardTrace, kept: Vec<Vec<usize>>, n_prefill: usize) -> Result<RunResult> {
        let n = self.n_in();
        let c = self.target.config();
        let cache = self.kept_cache(trace, n, &kept)?;
        let widest = kept.iter().map(Vec::len).max().unwrap_or(0);
        let peak = streamed_peak_entries(c.n_layers, c.n_kv_heads, n_prefill, widest);
        let mut r = self.finish(cache, trace.logits.row(n - 1), n, peak, 0)?;
        r.kept_kv = Some(kept);
        Ok(r)
    }

    fn per_slot<F: FnMut(usize, usize) -> Result<Vec<f64>>>(&self, mut f: F) -> Result<Vec<ScoreRow>> {
        let c = self.target.config();
        let mut rows = Vec::with_capacity(c.n_layers * c.n_kv_heads);
        for l in 0..c.n_layers {
            for h in 0..c.n_kv_heads {
                rows.push(ScoreRow {
                    layer: Some(l),
                    kv_head: Some(h),
                    scores: f(l, h)?,
                });
            }
        }
        Ok(rows)
    }

    fn select_all(&self, rows: &[ScoreRow], c_max: usize, n_window: usize) -> Result<Vec<Vec<usize>>> {
        rows.iter()
            .map(|r| select_kv_indices(&r.scores, c_max, n_window, self.n_in()))
            .collect()
    }

    fn streaming(&self, n_sink: usize, n_window: usize) -> Result<RunResult> {
        let n = self.n_in();
        self.check_room(self.target, n + self.max_new.saturating_sub(1))?;
        let trace = forward_prefill(self.target, self.prompt, PrefillOptions::default())?;
        let keep: Vec<usize> = (0..n).filter(|&i| i < n_sink || i + n_window >= n).collect();
        let c = self.target.config();
        let kept = vec![keep; c.n_layers * c.n_kv_heads];
        let mut r = self.drop_after_prefill(&trace, kept, n)?;
        r.resolved = serde_json::json!({ "n_sink": n_sink, "n_window": n_window, "c_max": n_sink + n_window });
        Ok(r)
    }

    fn h2o(&self, c_max: usize, n_window: Option<usize>) -> Result<RunResult> {
        let n = self.n_in();
        let n_window = scaled(n_window, 32, n);
        check_window(c_max, n_window, n)?;
        self.check_room(self.target, n + self.max_new.saturating_sub(1))?;
        let trace = forward_prefill(self.target, self.prompt, PrefillOptions { capture_attention: true })?;
        let layout = self.layout();
        let rows = self.per_slot(|l, h| h2o_head_scores(&trace, layout, l, h, n, n_window))?;
        let kept = self.select_all(&rows, c_max, n_window)?;
        let mut r = self.drop_after_prefill(&trace, kept, n)?;
        r.resolved = serde_json::json!({ "c_max": c_max, "n_window": n_window, "variant": "drop_once_after_prefill" });
        r.importance = Some(ImportanceScores {
            scope: Scope::PerLayerHead,
            rows,
            n_in: n,
            n_window,
            n_lookahead: 0,
        });
        Ok(r)
    }

    fn snapkv(&self, c: &SnapKvConfig) -> Result<RunResult> {
        let n = self.n_in();
        let res = ResolvedWindow {
            c_max: c.c_max,
            n_window: scaled(c.n_window, 32, n),
            kernel: scaled_odd(c.kernel, 7, n),
            reduce: c.reduce.unwrap_or(Reduce::Mean),
        };
        check_window(res.c_max, res.n_window, n)?;
        self.check_room(self.target, n + self.max_new.saturating_sub(1))?;
        let trace = forward_prefill(self.target, self.prompt, PrefillOptions::default())?;
        let params = WindowParams {
            n_in: n,
            n_window: res.n_window,
            kernel: res.kernel,
            reduce: res.reduce,
        };
        let layout = self.layout();
        let rows = self.per_slot(|l, h| {
            let lt = &trace.layers[l];
            layer_window_scores(&lt.q, &lt.k, layout, h, params)
        })?;
        let kept = self.select_all(&rows, res.c_max, res.n_window)?;
        let mut r = self.drop_after_prefill(&trace, kept, n)?;
        r.resolved = to_value(&res);
        r.importance = Some(ImportanceScores {
            scope: Scope::PerLayerHead,
            rows,
            n_in: n,
            n_window: res.n_window,
            n_lookahead: 0,
        });
        Ok(r)
    }

    /// Greedy lookahead with the draft. With `attention` set the prefill and
    /// decode attention rows are captured too.
    fn draft_lookahead(&self, prompt: &[u32], n_lookahead: usize, attention: bool) -> Result<DraftRun> {
        let draft = self.draft.ok_or_else(|| Error::invalid("policy needs a draft model"))?;
        let want_hidden = self.reference.is_some();
        self.check_room(draft, prompt.len() + n_lookahead)?;
        let trace = forward_prefill(draft, prompt, PrefillOptions { capture_attention: attention })?;
        let mut cache = KVCache::from_trace(&trace, draft.config(), prompt.len())?;
        let mut cap = DecodeCapture::new(attention);
        let opts = DecodeOptions {
            max_new: n_lookahead,
            stop: self.stop,
            feed_last: want_hidden,
        };
        let tokens = decode_greedy(draft, &mut cache, trace.last_logits(), prompt.len(), opts, Some(&mut cap))?;
        let epsilon = match self.reference {
            Some(r) => epsilon(r, &stack_hidden(&cap))?,
            None => None,
        };
        Ok(DraftRun {
            ops: cache.snapshot_costs().attention_score_ops,
            trace,
            tokens,
            capture: cap,
            epsilon,
        })
    }

    /// Target prefill over `prompt ++ lookahead` with per-layer lookahead
    /// scoring, then KV dropping to `c_max`. Returns the run with kept sets
    /// in `prompt` coordinates.
    fn speckv_stage(&self, prompt: &[u32], lookahead: &[u32], res: &ResolvedSpecKv) -> Result<(RunResult, Vec<ScoreRow>)> {
        let n = prompt.len();
        check_window(res.c_max, res.n_window, n)?;
        let tokens: Vec<u32> = prompt.iter().chain(lookahead).copied().collect();
        self.check_room(self.target, tokens.len().max(n + self.max_new.saturating_sub(1)))?;
        let params = WindowParams {
            n_in: n,
            n_window: res.n_window,
            kernel: res.kernel,
            reduce: res.reduce,
        };
        let mut src = LookaheadMaskSource::new(self.layout(), params, res.n_vert, res.n_slash, res.sparse_prefill)?;
        let trace = forward_prefill_with(self.target, &tokens, PrefillOptions::default(), Some(&mut src))?;
        let c = self.target.config();
        let mut rows = Vec::with_capacity(c.n_layers * c.n_kv_heads);
        for (l, layer) in src.scores.into_iter().enumerate() {
            for (h, scores) in layer.into_iter().enumerate() {
                rows.push(ScoreRow {
                    layer: Some(l),
                    kv_head: Some(h),
                    scores,
                });
            }
        }
        let kept: Vec<Vec<usize>> = rows
            .iter()
            .map(|r| select_kv_indices(&r.scores, res.c_max, res.n_window, n))
            .collect::<Result<_>>()?;
        let cache = {
            let mut cache = KVCache::from_trace(&trace, c, n)?;
            for l in 0..c.n_layers {
                for h in 0..c.n_kv_heads {
                    cache.evict_keep(l, h, &kept[l * c.n_kv_heads + h])?;
                }
            }
            let widest = kept.iter().map(Vec::len).max().unwrap_or(0);
            cache.with_capacity(Some(widest + self.max_new))
        };
        let widest = kept.iter().map(Vec::len).max().unwrap_or(0);
        let peak = streamed_peak_entries(c.n_layers, c.n_kv_heads, tokens.len(), widest);
        let mut r = self.finish(cache, trace.logits.row(n - 1), n, peak, 0)?;
        r.kept_kv = Some(kept);
        r.lookahead = lookahead.to_vec();
        Ok((r, rows))
    }

    fn speckv(&self, c: &SpecKvConfig) -> Result<RunResult> {
        let n = self.n_in();
        let res = ResolvedSpecKv::new(c, n, self.max_new);
        check_window(res.c_max, res.n_window, n)?;
        let dr = self.draft_lookahead(self.prompt, res.n_lookahead, false)?;
        let (mut r, rows) = self.speckv_stage(self.prompt, &dr.tokens, &res)?;
        r.draft_ops = dr.ops;
        r.epsilon = dr.epsilon;
        r.importance = Some(ImportanceScores {
            scope: Scope::PerLayerHead,
            rows,
            n_in: n,
            n_window: res.n_window,
            n_lookahead: dr.tokens.len(),
        });
        r.resolved = to_value(&res);
        Ok(r)
    }

    fn laqpp(&self, c: &LaqConfig) -> Result<RunResult> {
        let n = self.n_in();
        let n_window = scaled(c.n_window, 32, n);
        let kernel = scaled_odd(c.kernel, 7, n);
        let reduce = c.reduce.unwrap_or(Reduce::Max);
        let n_lookahead = c.n_lookahead.unwrap_or(8);
        let initial = c.initial_cache.unwrap_or(c.c_max);
        check_window(c.c_max, n_window, n)?;
        check_window(initial, n_window, n)?;
        self.check_room(self.target, n + n_lookahead.max(self.max_new.saturating_sub(1)))?;
        let cfg = self.target.config();
        let layout = self.layout();

        let trace = forward_prefill(self.target, self.prompt, PrefillOptions::default())?;
        let full = KVCache::from_trace(&trace, cfg, n)?;

        // cheap SnapKV-compressed copy to generate lookahead queries on
        let snap = WindowParams {
            n_in: n,
            n_window,
            kernel,
            reduce: Reduce::Mean,
        };
        let mut scratch = full.clone();
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_kv_heads {
                let lt = &trace.layers[l];
                let s = layer_window_scores(&lt.q, &lt.k, layout, h, snap)?;
                scratch.evict_keep(l, h, &select_kv_indices(&s, initial, n_window, n)?)?;
            }
        }
        let before = scratch.snapshot_costs().decode_ops;
        let mut cap = DecodeCapture::new(false);
        let opts = DecodeOptions {
            max_new: n_lookahead,
            stop: self.stop,
            feed_last: true,
        };
        let lookahead = decode_greedy(self.target, &mut scratch, trace.last_logits(), n, opts, Some(&mut cap))?;
        let lookahead_ops = scratch.snapshot_costs().decode_ops - before;

        let m = n - n_window;
        let rows = self.per_slot(|l, h| {
            let lt = &trace.layers[l];
            let mut queries: Vec<&[f64]> = (m..n).map(|i| lt.q.row(i)).collect();
            if let Some(qs) = cap.q.get(l) {
                queries.extend(qs.iter().map(Vec::as_slice));
            }
            window_scores(&queries, &lt.k, m, layout, h, kernel, reduce)
        })?;
        let kept = self.select_all(&rows, c.c_max, n_window)?;
        let mut cache = full;
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_kv_heads {
                cache.evict_keep(l, h, &kept[l * cfg.n_kv_heads + h])?;
            }
        }
        let peak = full_peak_entries(cfg.n_layers, cfg.n_kv_heads, n);
        let mut r = self.finish(cache, trace.last_logits(), n, peak, lookahead_ops)?;
        r.kept_kv = Some(kept);
        r.lookahead = lookahead;
        r.resolved = serde_json::json!({
            "c_max": c.c_max, "n_window": n_window, "kernel": kernel, "reduce": reduce,
            "n_lookahead": n_lookahead, "initial_cache": initial,
        });
        r.importance = Some(ImportanceScores {
            scope: Scope::PerLayerHead,
            rows,
            n_in: n,
            n_window,
            n_lookahead: r.lookahead.len(),
        });
        Ok(r)
    }

    fn prompt_compression(&self, c: &PromptCompressionConfig, d: PcDefaults, kv: Option<&SpecKvConfig>) -> Result<RunResult> {
        let n = self.n_in();
        let draft = self.draft.ok_or_else(|| Error::invalid("policy needs a draft model"))?;
        let res = ResolvedPc {
            c_max: c.c_max,
            n_window: scaled(c.n_window, d.n_window, n),
            kernel: scaled_odd(c.kernel, d.kernel, n),
            n_neighbor: scaled_odd(c.n_neighbor, d.n_neighbor, n),
            l_skip: c.l_skip.unwrap_or(d.l_skip).min(draft.config().n_layers - 1),
            n_lookahead: c.n_lookahead.unwrap_or(d.n_lookahead),
            reduce: c.reduce.unwrap_or(d.reduce),
        };
        check_window(res.c_max, res.n_window, n)?;
        if res.n_lookahead == 0 {
            return Err(Error::invalid("prompt compression needs n_lookahead >= 1"));
        }
        // the cascade generates enough lookahead for both stages in one run
        let kv_lookahead = kv.map(|k| k.n_lookahead.unwrap_or(self.max_new));
        let n_gen = res.n_lookahead.max(kv_lookahead.unwrap_or(0));
        let dr = self.draft_lookahead(self.prompt, n_gen, true)?;
        let pc_rows = res.n_lookahead.min(dr.tokens.len()).saturating_sub(1);
        let attn = assemble_attention(&dr.trace, Some(&dr.capture), n, pc_rows)?;
        let params = PromptScoreParams {
            n_in: n,
            n_window: res.n_window,
            kernel: res.kernel,
            n_neighbor: res.n_neighbor,
            l_skip: res.l_skip,
            reduce: res.reduce,
        };
        let scores = specpc_scores(&attn, params)?;
        let kept = select_prompt_tokens(&scores, res.c_max, res.n_window, n)?;
        let compressed: Vec<u32> = kept.iter().map(|&i| self.prompt[i]).collect();
        let importance = ImportanceScores {
            scope: Scope::Global,
            rows: vec![ScoreRow {
                layer: None,
                kv_head: None,
                scores,
            }],
            n_in: n,
            n_window: res.n_window,
            n_lookahead: pc_rows + 1,
        };

        let mut r = match kv {
            None => {
                let sub = Ctx {
                    prompt: &compressed,
                    ..*self
                };
                let mut r = sub.dense()?;
                r.lookahead = dr.tokens[..res.n_lookahead.min(dr.tokens.len())].to_vec();
                r.resolved = to_value(&res);
                r
            }
            Some(kvc) => {
                let sub = Ctx {
                    prompt: &compressed,
                    ..*self
                };
                let kres = ResolvedSpecKv::new(kvc, compressed.len(), self.max_new);
                let look = &dr.tokens[..kv_lookahead.unwrap_or(0).min(dr.tokens.len())];
                let (mut r, _) = sub.speckv_stage(&compressed, look, &kres)?;
                r.kept_kv = r
                    .kept_kv
                    .map(|sets| sets.into_iter().map(|s| s.into_iter().map(|i| kept[i]).collect()).collect());
                r.resolved = serde_json::json!({ "pc": to_value(&res), "kv": to_value(&kres) });
                r
            }
        };
        r.kept_prompt = Some(kept);
        r.draft_ops = dr.ops;
        r.epsilon = dr.epsilon;
        r.importance = Some(importance);
        Ok(r)
    }
}

impl Clone for Ctx<'_> {
    fn clone(&self) -> Self {
        *self
    }
}

impl Copy for Ctx<'_> {}

struct DraftRun {
    trace: ForwardTrace,
    tokens: Vec<u32>,
    capture: DecodeCapture,
    ops: u64,
    epsilon: Option<f64>,
}
