//! Runs every (model, policy, task) cell of a [`BenchConfig`] and writes
//! `results.json` and `results.csv`.
//!
//! Instances inside a cell run in parallel, but results are collected by
//! index and aggregated in index order, so the output does not depend on
//! scheduling. Wall-clock times are left out of both files for the same
//! reason.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kv_cache::CostCounters;
use crate::model::Model;
use crate::policy::{Pipeline, PolicyConfig, Reference, RunResult};

use super::config::BenchConfig;
use super::tasks::{derive_seed, generate_one, TaskInstance, TaskSpec};

/// Fixed CSV column order.
pub const CSV_COLUMNS: [&str; 12] = [
    "model",
    "policy",
    "kind",
    "haystack_len",
    "c_max",
    "count",
    "accuracy",
    "needle_recall",
    "prefill_ops",
    "decode_ops",
    "kv_bytes_peak",
    "epsilon",
];

#[derive(Clone, Debug, Serialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub answer: Vec<u32>,
    pub output: Vec<u32>,
    pub accuracy: f64,
    pub needle_recall: f64,
    pub costs: CostCounters,
    pub draft_ops: u64,
    pub epsilon: Option<f64>,
    pub resolved: serde_json::Value,
}

/// Mean of each cost counter over a cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MeanCosts {
    pub attention_score_ops: f64,
    pub prefill_ops: f64,
    pub decode_ops: f64,
    pub kv_bytes_peak: f64,
    pub kv_bytes_final: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResultRecord {
    pub model: String,
    pub policy: PolicyConfig,
    pub policy_name: String,
    pub task: TaskSpec,
    pub c_max: usize,
    pub count: usize,
    pub accuracy: f64,
    pub needle_recall: f64,
    pub costs: MeanCosts,
    /// Mean over instances that measured it.
    pub epsilon: Option<f64>,
    pub instances: Vec<InstanceRecord>,
}

/// Budget a policy keeps for a prompt of `n_in` tokens.
pub fn policy_budget(policy: &PolicyConfig, n_in: usize) -> usize {
    match policy {
        PolicyConfig::Dense => n_in,
        PolicyConfig::StreamingLlm(c) => (c.n_sink + c.n_window).min(n_in),
        PolicyConfig::H2o(c) => c.c_max,
        PolicyConfig::SnapKv(c) => c.c_max,
        PolicyConfig::SpecKv(c) => c.c_max,
        PolicyConfig::LaqPp(c) => c.c_max,
        PolicyConfig::SpecPc(c) | PolicyConfig::SpecPrefill(c) => c.c_max,
        PolicyConfig::SpecKvPc(c) => c.kv.c_max,
    }
}

/// Needle recall of one run: the mean over KV slots for KV-dropping
/// policies, the kept prompt tokens for prompt compression, 1 otherwise.
pub fn run_needle_recall(task: &TaskInstance, run: &RunResult) -> f64 {
    if let Some(sets) = &run.kept_kv {
        if sets.is_empty() {
            return 1.0;
        }
        return sets.iter().map(|s| task.needle_recall(s)).sum::<f64>() / sets.len() as f64;
    }
    if let Some(kept) = &run.kept_prompt {
        return task.needle_recall(kept);
    }
    1.0
}

/// Effective thread count: `SPECKV_LAB_THREADS` wins over the flag.
pub fn thread_count(flag: Option<usize>) -> usize {
    std::env::var("SPECKV_LAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .or(flag)
        .unwrap_or(0)
}

pub struct BenchRunner {
    config: BenchConfig,
    threads: usize,
}

impl BenchRunner {
    pub fn new(config: BenchConfig) -> Self {
        Self { config, threads: 0 }
    }

    /// 0 lets rayon pick.
    pub fn threads(mut self, n: usize) -> Self {
        self.threads = n;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.config.seed = seed;
        self
    }

    pub fn config(&self) -> &BenchConfig {
        &self.config
    }

    pub fn run(&self) -> Result<Vec<ResultRecord>> {
        self.config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        let mut out = Vec::new();
        for entry in &self.config.models {
            let model = entry.build()?;
            for task in &self.config.tasks {
                let task = TaskSpec {
                    seed: derive_seed(self.config.seed, task.seed),
                    ..task.clone()
                };
                let instances: Vec<TaskInstance> = (0..self.config.count)
                    .map(|i| generate_one(&task, &entry.induction, i))
                    .collect::<Result<_>>()?;
                for policy in &self.config.policies {
                    let records = pool.install(|| run_cell(&model, policy, &instances))?;
                    out.push(aggregate(&entry.name, policy, &task, records));
                }
            }
        }
        Ok(out)
    }

    /// Runs and writes `results.json` and `results.csv` into `dir`.
    pub fn run_to_dir(&self, dir: &Path) -> Result<Vec<ResultRecord>> {
        let records = self.run()?;
        write_results(dir, &records)?;
        Ok(records)
    }

    pub fn out_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.config.out.clone()).unwrap_or_else(|| PathBuf::from("results"))
    }
}

fn run_cell(model: &Model, policy: &PolicyConfig, instances: &[TaskInstance]) -> Result<Vec<InstanceRecord>> {
    let pipeline = Pipeline::new(model, policy.clone())?;
    let with_draft = policy.draft().is_some();
    instances
        .par_iter()
        .enumerate()
        .map(|(index, t)| {
            let max_new = t.answer.len();
            let reference = if with_draft {
                Some(Reference::compute(model, &t.prompt, max_new, None)?)
            } else {
                None
            };
            let r = pipeline.run_with_reference(&t.prompt, max_new, None, reference.as_ref())?;
            Ok(InstanceRecord {
                index,
                answer: t.answer.clone(),
                accuracy: t.exact_match(&r.output),
                needle_recall: run_needle_recall(t, &r),
                output: r.output,
                costs: r.costs,
                draft_ops: r.draft_ops,
                epsilon: r.epsilon,
                resolved: r.resolved,
            })
        })
        .collect()
}

fn aggregate(model: &str, policy: &PolicyConfig, task: &TaskSpec, instances: Vec<InstanceRecord>) -> ResultRecord {
    let n = instances.len().max(1) as f64;
    let mean = |f: &dyn Fn(&InstanceRecord) -> f64| instances.iter().map(f).sum::<f64>() / n;
    let eps: Vec<f64> = instances.iter().filter_map(|r| r.epsilon).collect();
    ResultRecord {
        model: model.to_string(),
        policy: policy.clone(),
        policy_name: policy.label(),
        task: task.clone(),
        c_max: policy_budget(policy, task.haystack_len),
        count: instances.len(),
        accuracy: mean(&|r| r.accuracy),
        needle_recall: mean(&|r| r.needle_recall),
        costs: MeanCosts {
            attention_score_ops: mean(&|r| r.costs.attention_score_ops as f64),
            prefill_ops: mean(&|r| r.costs.prefill_ops as f64),
            decode_ops: mean(&|r| r.costs.decode_ops as f64),
            kv_bytes_peak: mean(&|r| r.costs.kv_bytes_peak as f64),
            kv_bytes_final: mean(&|r| r.costs.kv_bytes_final as f64),
        },
        epsilon: (!eps.is_empty()).then(|| eps.iter().sum::<f64>() / eps.len() as f64),
        instances,
    }
}

pub fn write_csv<W: std::io::Write>(w: W, records: &[ResultRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    for r in records {
        out.write_record([
            r.model.clone(),
            r.policy_name.clone(),
            r.task.kind_label(),
            r.task.haystack_len.to_string(),
            r.c_max.to_string(),
            r.count.to_string(),
            r.accuracy.to_string(),
            r.needle_recall.to_string(),
            r.costs.prefill_ops.to_string(),
            r.costs.decode_ops.to_string(),
            r.costs.kv_bytes_peak.to_string(),
            r.epsilon.map(|e| e.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_results(dir: &Path, records: &[ResultRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(std::fs::File::create(dir.join("results.csv"))?, records)?;
    let json = serde_json::to_string_pretty(records)?;
    std::fs::write(dir.join("results.json"), json)?;
    Ok(())
}
