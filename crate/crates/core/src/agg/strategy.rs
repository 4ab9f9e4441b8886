//! Aggregation-weight strategies behind a common trait, registered by name
//! and selected at runtime from the config.

use crate::error::{Error, Result};

use super::{cosine_weights, klaw_weights, klpwa_client_weights, praw_weights};

/// Per-client inputs the server has at the aggregation barrier.
#[derive(Debug, Clone, Default)]
pub struct AggInputs {
    pub dataset_sizes: Vec<usize>,
    pub pruning_ratios: Vec<f64>,
    pub klaw_raws: Vec<f64>,
    /// Unit-norm mean feature vector per client under the model it received.
    pub prev_feats: Vec<Vec<f64>>,
    /// Same under the model it uploads.
    pub new_feats: Vec<Vec<f64>>,
}

/// Computes one non-negative weight per client, summing to 1.
pub trait WeightStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn client_weights(&self, inputs: &AggInputs) -> Result<Vec<f64>>;
}

/// Dataset-size weighting.
pub struct FedAvgStrategy;

impl WeightStrategy for FedAvgStrategy {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn client_weights(&self, inputs: &AggInputs) -> Result<Vec<f64>> {
        let total: usize = inputs.dataset_sizes.iter().sum();
        if total == 0 {
            return Err(Error::EmptyInput("fedavg dataset sizes"));
        }
        Ok(inputs
            .dataset_sizes
            .iter()
            .map(|&n| n as f64 / total as f64)
            .collect())
    }
}

/// Cosine-distance baseline: weight grows with how far each client's mean
/// feature vector moved during local training.
pub struct CosineStrategy;

impl WeightStrategy for CosineStrategy {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn client_weights(&self, inputs: &AggInputs) -> Result<Vec<f64>> {
        cosine_weights(&inputs.prev_feats, &inputs.new_feats)
    }
}

/// KLPWA: convex combination of KLAW (distribution shift) and PRAW
/// (squared pruning ratio) weights.
pub struct KlpwaStrategy {
    pub gamma: f64,
    pub delta: f64,
}

impl WeightStrategy for KlpwaStrategy {
    fn name(&self) -> &'static str {
        "klpwa"
    }

    fn client_weights(&self, inputs: &AggInputs) -> Result<Vec<f64>> {
        let klaw = klaw_weights(&inputs.klaw_raws)?;
        let praw = praw_weights(&inputs.pruning_ratios)?;
        klpwa_client_weights(&klaw, &praw, self.gamma, self.delta)
    }
}

pub const STRATEGY_NAMES: &[&str] = &["fedavg", "cosine", "klpwa"];

/// Looks a strategy up by name. `gamma`/`delta` only apply to `klpwa`.
pub fn create_strategy(name: &str, gamma: f64, delta: f64) -> Result<Box<dyn WeightStrategy>> {
    match name {
        "fedavg" => Ok(Box::new(FedAvgStrategy)),
        "cosine" => Ok(Box::new(CosineStrategy)),
        "klpwa" => Ok(Box::new(KlpwaStrategy { gamma, delta })),
        other => Err(Error::Config(format!(
            "unknown aggregation.strategy {other:?}; known strategies: {}",
            STRATEGY_NAMES.join(", ")
        ))),
    }
}
