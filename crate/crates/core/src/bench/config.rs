//! TOML configuration for `bench` runs. See `docs/bench-config.md`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_induction_model, load_model, InductionSpec, Model};
use crate::policy::PolicyConfig;

use super::tasks::TaskSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub models: Vec<ModelEntry>,
    pub policies: Vec<PolicyConfig>,
    pub tasks: Vec<TaskSpec>,
    pub count: usize,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

/// A model to benchmark. Without `path` the hand-built induction model for
/// `induction` is used; with it the file is loaded and `induction` only
/// describes the token layout the tasks are written in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub induction: InductionSpec,
    /// Residual width of the built model; defaults to the smallest that fits.
    #[serde(default)]
    pub d_model: Option<usize>,
}

impl ModelEntry {
    pub fn induction(name: &str) -> Self {
        Self {
            name: name.to_string(),
            path: None,
            induction: InductionSpec::default(),
            d_model: None,
        }
    }

    pub fn build(&self) -> Result<Model> {
        let model = match &self.path {
            Some(p) => load_model(p)?,
            None => build_induction_model(self.induction, self.d_model.unwrap_or(self.induction.required_d_model()))?,
        };
        let need = self.induction.vocab().size();
        if model.config().vocab_size < need {
            return Err(Error::Config {
                field: format!("models.{}", self.name),
                message: format!("vocabulary {} is smaller than the task vocabulary {need}", model.config().vocab_size),
            });
        }
        Ok(model)
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| {
                let line = text[..s.start].matches('\n').count() + 1;
                format!("line {line}")
            });
            Error::Config {
                field: field.unwrap_or_else(|| "config".into()),
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: path.display().to_string(),
            message: format!("cannot read config: {e}"),
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.to_string(),
                message,
            })
        };
        if self.models.is_empty() {
            return bad("models", "at least one model is required".into());
        }
        if self.policies.is_empty() {
            return bad("policies", "at least one policy is required".into());
        }
        if self.tasks.is_empty() {
            return bad("tasks", "at least one task is required".into());
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("models", "model names must be unique".into());
        }
        for m in &self.models {
            for t in &self.tasks {
                t.validate(&m.induction)?;
            }
        }
        Ok(())
    }
}
