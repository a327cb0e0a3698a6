//! Synthetic recall benchmark: task generation, the policy runner and its
//! configuration file.

pub mod config;
pub mod runner;
pub mod tasks;

pub use config::{BenchConfig, ModelEntry};
pub use runner::{run_needle_recall, write_csv, write_results, BenchRunner, InstanceRecord, ResultRecord, CSV_COLUMNS};
pub use tasks::{derive_seed, generate_one, generate_tasks, resolve, NeedlePlacement, TaskInstance, TaskKind, TaskSpec};
