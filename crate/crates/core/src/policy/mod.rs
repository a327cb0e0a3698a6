//! Compression policies as data, and the pipeline that executes them.
//!
//! Every optional field falls back to a default scaled for short prompts:
//! `min(default, n_in / 2)`, made odd for pooling kernels. Explicit values
//! are used as given. The values actually used are recorded in
//! [`RunResult::resolved`].
//!
//! ```
//! use speckv_lab::policy::PolicyConfig;
//! let p: PolicyConfig = serde_json::from_str(r#"{"policy":"snapkv","c_max":48}"#).unwrap();
//! assert_eq!(p.name(), "snapkv");
//! ```

mod pipeline;

pub use pipeline::{run_pipeline, Pipeline, Reference, RunResult};

use serde::{Deserialize, Serialize};

use crate::importance::Reduce;
use crate::model::DraftMode;

/// Which draft model a lookahead policy derives from its target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftSpec {
    #[serde(flatten)]
    pub mode: DraftMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DraftSpec {
    fn default() -> Self {
        Self {
            mode: DraftMode::Identical,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamingConfig {
    pub n_sink: usize,
    pub n_window: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct H2oConfig {
    pub c_max: usize,
    #[serde(default)]
    pub n_window: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapKvConfig {
    pub c_max: usize,
    #[serde(default)]
    pub n_window: Option<usize>,
    #[serde(default)]
    pub kernel: Option<usize>,
    #[serde(default)]
    pub reduce: Option<Reduce>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecKvConfig {
    pub c_max: usize,
    #[serde(default)]
    pub n_window: Option<usize>,
    #[serde(default)]
    pub kernel: Option<usize>,
    #[serde(default)]
    pub reduce: Option<Reduce>,
    /// Defaults to the run's `max_new`.
    #[serde(default)]
    pub n_lookahead: Option<usize>,
    #[serde(default)]
    pub n_vert: Option<usize>,
    #[serde(default)]
    pub n_slash: Option<usize>,
    /// `false` keeps prefill dense while still scoring with lookahead queries.
    #[serde(default = "default_true")]
    pub sparse_prefill: bool,
    #[serde(default)]
    pub draft: DraftSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaqConfig {
    pub c_max: usize,
    #[serde(default)]
    pub n_window: Option<usize>,
    #[serde(default)]
    pub kernel: Option<usize>,
    #[serde(default)]
    pub reduce: Option<Reduce>,
    #[serde(default)]
    pub n_lookahead: Option<usize>,
    /// Size of the cheap cache the lookahead queries are generated on.
    #[serde(default)]
    pub initial_cache: Option<usize>,
}

/// Shared by SpecPC and SpecPrefill, which differ only in defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptCompressionConfig {
    pub c_max: usize,
    #[serde(default)]
    pub n_window: Option<usize>,
    #[serde(default)]
    pub kernel: Option<usize>,
    #[serde(default)]
    pub n_neighbor: Option<usize>,
    #[serde(default)]
    pub l_skip: Option<usize>,
    #[serde(default)]
    pub n_lookahead: Option<usize>,
    #[serde(default)]
    pub reduce: Option<Reduce>,
    #[serde(default)]
    pub draft: DraftSpec,
}

/// Prompt compression to `pc.c_max`, then KV dropping to `kv.c_max`. One
/// draft run (from `pc.draft`) serves both stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecKvPcConfig {
    pub pc: PromptCompressionConfig,
    pub kv: SpecKvConfig,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy")]
pub enum PolicyConfig {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "streaming_llm")]
    StreamingLlm(StreamingConfig),
    /// Drops once after prefill rather than at every decode step.
    #[serde(rename = "h2o")]
    H2o(H2oConfig),
    #[serde(rename = "snapkv")]
    SnapKv(SnapKvConfig),
    #[serde(rename = "speckv")]
    SpecKv(SpecKvConfig),
    #[serde(rename = "laqpp")]
    LaqPp(LaqConfig),
    #[serde(rename = "specpc")]
    SpecPc(PromptCompressionConfig),
    #[serde(rename = "specprefill")]
    SpecPrefill(PromptCompressionConfig),
    #[serde(rename = "speckv_pc")]
    SpecKvPc(SpecKvPcConfig),
}

impl PolicyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::Dense => "dense",
            PolicyConfig::StreamingLlm(_) => "streaming_llm",
            PolicyConfig::H2o(_) => "h2o",
            PolicyConfig::SnapKv(_) => "snapkv",
            PolicyConfig::SpecKv(_) => "speckv",
            PolicyConfig::LaqPp(_) => "laqpp",
            PolicyConfig::SpecPc(_) => "specpc",
            PolicyConfig::SpecPrefill(_) => "specprefill",
            PolicyConfig::SpecKvPc(_) => "speckv_pc",
        }
    }

    /// Name plus the draft when it is not the target itself, so that
    /// cells differing only in their draft stay distinguishable.
    pub fn label(&self) -> String {
        match self.draft() {
            Some(d) if d.mode != DraftMode::Identical => format!("{}[{}]", self.name(), d.mode.label()),
            _ => self.name().to_string(),
        }
    }

    pub fn draft(&self) -> Option<DraftSpec> {
        match self {
            PolicyConfig::SpecKv(c) => Some(c.draft),
            PolicyConfig::SpecPc(c) | PolicyConfig::SpecPrefill(c) => Some(c.draft),
            PolicyConfig::SpecKvPc(c) => Some(c.pc.draft),
            _ => None,
        }
    }

    /// Budget-free version of this policy, used by identity checks.
    pub fn unlimited(&self, n_in: usize) -> PolicyConfig {
        let big = n_in.max(1);
        let mut p = self.clone();
        match &mut p {
            PolicyConfig::Dense => {}
            PolicyConfig::StreamingLlm(c) => {
                c.n_sink = big;
                c.n_window = big;
            }
            PolicyConfig::H2o(c) => c.c_max = big,
            PolicyConfig::SnapKv(c) => c.c_max = big,
            PolicyConfig::SpecKv(c) => {
                c.c_max = big;
                c.n_vert = Some(big);
                c.n_slash = Some(big);
            }
            PolicyConfig::LaqPp(c) => {
                c.c_max = big;
                c.initial_cache = None;
            }
            PolicyConfig::SpecPc(c) | PolicyConfig::SpecPrefill(c) => c.c_max = big,
            PolicyConfig::SpecKvPc(c) => {
                c.pc.c_max = big;
                c.kv.c_max = big;
                c.kv.n_vert = Some(big);
                c.kv.n_slash = Some(big);
            }
        }
        p
    }
}

/// Default scaled to the prompt: `min(default, n_in / 2)`, at least 1.
pub(crate) fn scaled(user: Option<usize>, default: usize, n_in: usize) -> usize {
    user.unwrap_or_else(|| default.min((n_in / 2).max(1)))
}

/// Like [`scaled`] but rounds an even default down to the next odd number.
pub(crate) fn scaled_odd(user: Option<usize>, default: usize, n_in: usize) -> usize {
    user.unwrap_or_else(|| {
        let k = default.min((n_in / 2).max(1));
        if k.is_multiple_of(2) {
            k - 1
        } else {
            k
        }
    })
}
