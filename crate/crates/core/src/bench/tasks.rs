//! Synthetic key→value recall tasks for the induction model.
//!
//! A prompt is `BOS`, a haystack of filler tokens with `key value SEP`
//! triples hidden in it, and finally `QUERY key`. Single-hop asks for the
//! value of one key. Multi-hop hides a chain `k1→k2, k2→k3, …, k_h→v` and
//! asks for every link after the queried key, so the expected output is
//! `[k2, …, k_h, v]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InductionSpec, InductionVocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleHop,
    MultiHop,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeedlePlacement {
    #[default]
    UniformRandom,
    /// Evenly spaced through the haystack.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Chain length for multi-hop tasks (at least 2).
    #[serde(default)]
    pub hops: Option<usize>,
    /// Total number of key-value pairs, chain links included.
    pub n_pairs: usize,
    /// Total prompt length in tokens.
    pub haystack_len: usize,
    #[serde(default)]
    pub needle_positions: NeedlePlacement,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn single_hop(n_pairs: usize, haystack_len: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::SingleHop,
            hops: None,
            n_pairs,
            haystack_len,
            needle_positions: NeedlePlacement::UniformRandom,
            seed,
        }
    }

    pub fn multi_hop(hops: usize, n_pairs: usize, haystack_len: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::MultiHop,
            hops: Some(hops),
            n_pairs,
            haystack_len,
            needle_positions: NeedlePlacement::UniformRandom,
            seed,
        }
    }

    /// Number of chained pairs the answer depends on.
    pub fn hops(&self) -> usize {
        match self.kind {
            TaskKind::SingleHop => 1,
            TaskKind::MultiHop => self.hops.unwrap_or(2),
        }
    }

    pub fn kind_label(&self) -> String {
        match self.kind {
            TaskKind::SingleHop => "single_hop".into(),
            TaskKind::MultiHop => format!("multi_hop{}", self.hops()),
        }
    }

    /// Tokens outside the haystack body: `BOS` in front, `QUERY key` at the end.
    pub const FRAME: usize = 3;

    pub fn validate(&self, induction: &InductionSpec) -> Result<()> {
        let bad = |m: String| Err(Error::Config { field: "tasks".into(), message: m });
        let hops = self.hops();
        if self.kind == TaskKind::MultiHop && hops < 2 {
            return bad(format!("multi_hop needs hops >= 2, got {hops}"));
        }
        if self.kind == TaskKind::SingleHop && self.hops.is_some_and(|h| h != 1) {
            return bad("single_hop takes no hops".into());
        }
        if self.n_pairs < hops {
            return bad(format!("n_pairs {} is below the chain length {hops}", self.n_pairs));
        }
        if self.n_pairs > induction.n_keys {
            return bad(format!("n_pairs {} exceeds the {} distinct keys", self.n_pairs, induction.n_keys));
        }
        let need = 3 * self.n_pairs + Self::FRAME;
        if self.haystack_len < need {
            return bad(format!("haystack_len {} cannot hold {} pairs (needs {need})", self.haystack_len, self.n_pairs));
        }
        if self.haystack_len > induction.max_positions {
            return bad(format!("haystack_len {} exceeds max_positions {}", self.haystack_len, induction.max_positions));
        }
        if induction.n_filler == 0 && self.haystack_len > need {
            return bad("haystack needs filler tokens".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    /// Half-open `[start, end)` spans of the `key value` tokens the answer
    /// depends on.
    pub needle_spans: Vec<(usize, usize)>,
    /// Spans of every `key value` pair in the haystack, distractors included.
    pub pair_spans: Vec<(usize, usize)>,
}

impl TaskInstance {
    pub fn needle_indices(&self) -> Vec<usize> {
        expand(&self.needle_spans)
    }

    pub fn pair_token_count(&self) -> usize {
        self.pair_spans.iter().map(|(a, b)| b - a).sum()
    }

    /// Fraction of needle tokens inside `kept` (sorted or not).
    pub fn needle_recall(&self, kept: &[usize]) -> f64 {
        let needles = self.needle_indices();
        if needles.is_empty() {
            return 1.0;
        }
        let mut mark = vec![false; self.prompt.len()];
        for &i in kept {
            if i < mark.len() {
                mark[i] = true;
            }
        }
        needles.iter().filter(|&&i| mark[i]).count() as f64 / needles.len() as f64
    }

    /// 1 when the generated tokens start with the full answer, else 0.
    pub fn exact_match(&self, output: &[u32]) -> f64 {
        if output.len() >= self.answer.len() && output[..self.answer.len()] == self.answer[..] {
            1.0
        } else {
            0.0
        }
    }
}

fn expand(spans: &[(usize, usize)]) -> Vec<usize> {
    spans.iter().flat_map(|&(a, b)| a..b).collect()
}

/// Deterministic 64-bit mix of a seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_tasks(spec: &TaskSpec, induction: &InductionSpec, count: usize) -> Result<Vec<TaskInstance>> {
    spec.validate(induction)?;
    (0..count).map(|i| generate_one(spec, induction, i)).collect()
}

/// Instance `index` of a spec; identical to element `index` of
/// [`generate_tasks`].
pub fn generate_one(spec: &TaskSpec, induction: &InductionSpec, index: usize) -> Result<TaskInstance> {
    spec.validate(induction)?;
    let voc = induction.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let hops = spec.hops();

    let mut keys: Vec<usize> = (0..induction.n_keys).collect();
    keys.shuffle(&mut rng);
    let keys = &keys[..spec.n_pairs];

    // chain pairs first (keys[0] → keys[1] → … → value), then distractors
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(spec.n_pairs);
    for h in 0..hops {
        let next = if h + 1 < hops {
            voc.key(keys[h + 1])
        } else {
            voc.value(rng.random_range(0..induction.n_values))
        };
        pairs.push((voc.key(keys[h]), next));
    }
    for &k in &keys[hops..] {
        pairs.push((voc.key(k), voc.value(rng.random_range(0..induction.n_values))));
    }
    let query = pairs[0].0;
    let answer: Vec<u32> = pairs[..hops].iter().map(|p| p.1).collect();

    let body_len = spec.haystack_len - TaskSpec::FRAME;
    let slack = body_len - 3 * spec.n_pairs;
    // gaps[i] filler tokens go before triple i, the remainder after the last
    let gaps: Vec<usize> = match spec.needle_positions {
        NeedlePlacement::Fixed => {
            let per = slack / (spec.n_pairs + 1);
            vec![per; spec.n_pairs]
        }
        NeedlePlacement::UniformRandom => {
            let mut cuts: Vec<usize> = (0..spec.n_pairs).map(|_| rng.random_range(0..=slack)).collect();
            cuts.sort_unstable();
            let mut prev = 0;
            cuts.iter()
                .map(|&c| {
                    let g = c - prev;
                    prev = c;
                    g
                })
                .collect()
        }
    };
    let mut order: Vec<usize> = (0..spec.n_pairs).collect();
    order.shuffle(&mut rng);

    let filler = |rng: &mut ChaCha8Rng| voc.filler(rng.random_range(0..induction.n_filler));
    let mut prompt = Vec::with_capacity(spec.haystack_len);
    prompt.push(InductionVocab::BOS);
    let mut spans = vec![(0, 0); spec.n_pairs];
    for (slot, &p) in order.iter().enumerate() {
        for _ in 0..gaps[slot] {
            prompt.push(filler(&mut rng));
        }
        spans[p] = (prompt.len(), prompt.len() + 2);
        prompt.push(pairs[p].0);
        prompt.push(pairs[p].1);
        prompt.push(InductionVocab::SEP);
    }
    while prompt.len() < spec.haystack_len - 2 {
        prompt.push(filler(&mut rng));
    }
    prompt.push(InductionVocab::QUERY);
    prompt.push(query);

    let mut pair_spans = spans.clone();
    pair_spans.sort_unstable();
    let mut needle_spans = spans[..hops].to_vec();
    needle_spans.sort_unstable();
    Ok(TaskInstance {
        prompt,
        answer,
        needle_spans,
        pair_spans,
    })
}

/// Reads the answer back out of a prompt: follows `key value SEP` links from
/// the queried key until a value token is reached.
pub fn resolve(prompt: &[u32], vocab: &InductionVocab) -> Option<Vec<u32>> {
    let n = prompt.len();
    if n < 2 || prompt[n - 2] != InductionVocab::QUERY {
        return None;
    }
    let mut links = std::collections::HashMap::new();
    for w in prompt[..n - 2].windows(3) {
        if vocab.is_key(w[0]) && w[2] == InductionVocab::SEP {
            links.insert(w[0], w[1]);
        }
    }
    let mut out = Vec::new();
    let mut cur = prompt[n - 1];
    while let Some(&next) = links.get(&cur) {
        out.push(next);
        if !vocab.is_key(next) || out.len() > links.len() {
            break;
        }
        cur = next;
    }
    (!out.is_empty()).then_some(out)
}
