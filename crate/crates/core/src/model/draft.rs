use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Model;

/// How a draft model is obtained from its target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DraftMode {
    /// Same weights as the target.
    Identical,
    /// Every weight perturbed by i.i.d. `N(0, sigma²)`.
    Noise { sigma: f64 },
    /// First `layers` layers plus the target's final norm and unembedding.
    Truncate { layers: usize },
}

impl DraftMode {
    pub fn label(&self) -> String {
        match self {
            DraftMode::Identical => "identical".into(),
            DraftMode::Noise { sigma } => format!("noise(sigma={sigma})"),
            DraftMode::Truncate { layers } => format!("truncate(layers={layers})"),
        }
    }
}

pub fn derive_draft(model: &Model, mode: DraftMode, seed: u64) -> Result<Model> {
    match mode {
        DraftMode::Identical => Ok(model.clone()),
        DraftMode::Noise { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::invalid(format!("noise sigma must be finite and >= 0, got {sigma}")));
            }
            let mut draft = model.clone();
            if sigma == 0.0 {
                return Ok(draft);
            }
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for buf in draft.buffers_mut() {
                for w in buf.iter_mut() {
                    *w += normal.sample(&mut rng);
                }
            }
            Ok(draft)
        }
        DraftMode::Truncate { layers } => model.truncated(layers),
    }
}
