//! Desk-scale transformer inference with draft-lookahead KV-cache and prompt
//! compression policies.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`linalg`]: dense `f64` kernels and singular values.
//! * [`model`]: a decoder-only transformer with traces, greedy decoding,
//!   draft derivation and a hand-built induction model.
//! * [`kv_cache`]: per-head key/value storage with op and byte counters.
//! * [`importance`]: attention-based key scoring and kept-set selection.
//! * [`sparse_prefill`]: vertical-slash masked prefill.
//! * [`policy`]: every compression method behind one [`policy::run_pipeline`].
//! * [`theory`]: numerical checks of the error bounds behind lookahead scoring.
//! * [`bench`] and [`cli`]: synthetic recall tasks, the benchmark runner and
//!   the command-line front end.

// Index loops mirror the math in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod bench;
pub mod cli;
pub mod error;
pub mod importance;
pub mod kv_cache;
pub mod linalg;
pub mod model;
pub mod policy;
pub mod sparse_prefill;
pub mod stats;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use kv_cache::{CostCounters, KVCache};
pub use model::{Model, ModelConfig};
pub use policy::{run_pipeline, PolicyConfig, RunResult};
pub use tensor::Tensor;
