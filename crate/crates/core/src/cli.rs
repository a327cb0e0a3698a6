//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code:
//!
//! * `0` on success,
//! * `1` when a check fails (a violated bound, or a runtime failure),
//! * `2` on usage, configuration or input errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::bench::{BenchConfig, BenchRunner};
use crate::error::{Error, Result};
use crate::model::load_model;
use crate::policy::{Pipeline, PolicyConfig};
use crate::theory::{run_suite, Suite, SuiteReport};

#[derive(Debug, Parser)]
#[command(name = "speckv-lab", version, about = "Draft-lookahead KV-cache and prompt compression lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a benchmark config and write results.json and results.csv.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; SPECKV_LAB_THREADS takes precedence.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Numerically check the error bounds and write a JSON report.
    Verify {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        /// Trial count (per-suite default when omitted).
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prompt's keys with a policy and write them as CSV.
    DumpImportance {
        #[arg(long)]
        model: PathBuf,
        /// Whitespace- or comma-separated token ids.
        #[arg(long)]
        prompt_file: PathBuf,
        /// Policy as inline JSON, or a path to a JSON file.
        #[arg(long)]
        policy: String,
        #[arg(long)]
        out: PathBuf,
        /// Tokens to generate (also the default lookahead length).
        #[arg(long, default_value_t = 8)]
        max_new: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Lemma1,
    Lemma2,
    Theorem1,
    Theorem2,
    Theorem4,
    Fig2a,
    All,
}

impl SuiteArg {
    fn suites(self) -> Vec<Suite> {
        match self {
            SuiteArg::Lemma1 => vec![Suite::Lemma1],
            SuiteArg::Lemma2 => vec![Suite::Lemma2],
            SuiteArg::Theorem1 => vec![Suite::Theorem1],
            SuiteArg::Theorem2 => vec![Suite::Theorem2],
            SuiteArg::Theorem4 => vec![Suite::Theorem4],
            SuiteArg::Fig2a => vec![Suite::Fig2a],
            SuiteArg::All => Suite::ALL.to_vec(),
        }
    }
}

/// Outcome of a subcommand that ran to completion.
enum Outcome {
    Ok,
    Violation,
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::Violation) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::InvalidConfig(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Format(_)
        | Error::Budget(_)
        | Error::TokenOutOfVocab { .. }
        | Error::LengthOverflow { .. } => 2,
        _ => 1,
    }
}

fn execute(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Bench {
            config,
            out,
            seed,
            threads,
        } => {
            let cfg = BenchConfig::load(&config)?;
            let mut runner = BenchRunner::new(cfg).threads(crate::bench::runner::thread_count(threads));
            if let Some(s) = seed {
                runner = runner.seed(s);
            }
            let dir = runner.out_dir(out);
            let records = runner.run_to_dir(&dir)?;
            log::info!("wrote {} cells to {}", records.len(), dir.display());
            println!("{}", dir.join("results.csv").display());
            Ok(Outcome::Ok)
        }
        Command::Verify {
            suite,
            trials,
            seed,
            out,
        } => {
            let reports: Vec<SuiteReport> = suite
                .suites()
                .into_iter()
                .map(|s| run_suite(s, trials, seed))
                .collect::<Result<_>>()?;
            let passed = reports.iter().all(SuiteReport::passed);
            let json = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])?
            } else {
                serde_json::to_string_pretty(&reports)?
            };
            match out {
                Some(path) => std::fs::write(&path, json + "\n").map_err(|e| io_at(&path, e))?,
                None => println!("{json}"),
            }
            Ok(if passed { Outcome::Ok } else { Outcome::Violation })
        }
        Command::DumpImportance {
            model,
            prompt_file,
            policy,
            out,
            max_new,
        } => {
            let model = load_model(&model)?;
            let prompt = read_prompt(&prompt_file)?;
            let policy = parse_policy(&policy)?;
            let result = Pipeline::new(&model, policy)?.without_epsilon().run(&prompt, max_new, None)?;
            let scores = result.importance.ok_or_else(|| Error::Config {
                field: "policy".into(),
                message: format!("{} does not score keys", result.policy),
            })?;
            let file = std::fs::File::create(&out).map_err(|e| io_at(&out, e))?;
            scores.write_csv(std::io::BufWriter::new(file))?;
            Ok(Outcome::Ok)
        }
    }
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Config {
        field: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Token ids separated by whitespace or commas.
pub fn read_prompt(path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_at(path, e))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>().map_err(|_| Error::Config {
                field: path.display().to_string(),
                message: format!("not a token id: {s:?}"),
            })
        })
        .collect()
}

/// Inline JSON when the argument starts with `{`, otherwise a file path.
pub fn parse_policy(arg: &str) -> Result<PolicyConfig> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).map_err(|e| io_at(Path::new(arg), e))?
    };
    serde_json::from_str(&text).map_err(|e| Error::Config {
        field: "policy".into(),
        message: e.to_string(),
    })
}
