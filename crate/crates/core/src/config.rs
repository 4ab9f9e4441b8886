//! Experiment configuration: one human-editable file with every default
//! overridable. Unknown keys are rejected at load.

use serde::{Deserialize, Serialize};

use crate::agg::{EmptyCoordRule, STRATEGY_NAMES};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nnet::{Activation, NetConfig};
use crate::prune::{CrrState, PruneControllerState};
use crate::seeding::{derive_seed, stream};
use crate::synthdata::SkewSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Run clients on worker threads; results are identical to sequential
    /// execution by construction.
    pub parallel_clients: bool,
    pub net: NetSection,
    pub losses: LossSection,
    pub optimizer: OptimizerSection,
    pub clustering: ClusterSection,
    pub pruning: PruneSection,
    pub aggregation: AggSection,
    pub data: DataSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            clients: 8,
            rounds: 20,
            local_epochs: 5,
            batch_size: 16,
            parallel_clients: false,
            net: NetSection::default(),
            losses: LossSection::default(),
            optimizer: OptimizerSection::default(),
            clustering: ClusterSection::default(),
            pruning: PruneSection::default(),
            aggregation: AggSection::default(),
            data: DataSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection {
            input_dim: 24,
            hidden_dims: vec![48, 32],
            embed_dim: 16,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_ca: f64,
    pub delta_kl: f64,
    pub k_hard: usize,
    /// Memory bank softmax temperature.
    pub tau: f64,
    /// Memory bank momentum on the old entry.
    pub momentum: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            alpha: 1.0,
            beta: 1.0,
            gamma_ca: 0.5,
            delta_kl: 0.13,
            k_hard: 50,
            tau: 0.05,
            momentum: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 3.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            eps: 0.5,
            min_pts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub enabled: bool,
    pub target_ratio: f64,
    pub per_event_cap: f64,
    pub eval_epochs_max: u32,
    pub acc_threshold: f64,
    pub delta_rd: f64,
    pub delta_ep: f64,
    pub window: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            enabled: true,
            target_ratio: 0.70,
            per_event_cap: 0.09,
            eval_epochs_max: 10,
            acc_threshold: 0.55,
            delta_rd: 0.01,
            delta_ep: 0.03,
            window: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggSection {
    /// One of the registered strategy names (fedavg, cosine, klpwa).
    pub strategy: String,
    pub gamma: f64,
    pub delta: f64,
    pub sas: bool,
    pub empty_coord: EmptyCoordRule,
}

impl Default for AggSection {
    fn default() -> Self {
        AggSection {
            strategy: "klpwa".into(),
            gamma: 0.5,
            delta: 0.5,
            sas: true,
            empty_coord: EmptyCoordRule::Retain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub identities_min: usize,
    pub identities_max: usize,
    pub images_per_identity_min: usize,
    pub images_per_identity_max: usize,
    pub cameras_min: usize,
    pub cameras_max: usize,
    pub camera_shift: f64,
    pub noise_scale: f64,
    pub holdout_fraction: f64,
    pub validation_batch: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            identities_min: 8,
            identities_max: 14,
            images_per_identity_min: 6,
            images_per_identity_max: 12,
            cameras_min: 2,
            cameras_max: 8,
            camera_shift: 0.5,
            noise_scale: 0.2,
            holdout_fraction: 0.10,
            validation_batch: 32,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.net_config().validate().map_err(rewrap)?;
        self.loss_weights().validate().map_err(rewrap)?;
        if self.losses.tau <= 0.0 {
            return Err(Error::Config("losses.tau must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.losses.momentum) {
            return Err(Error::Config("losses.momentum must lie in [0, 1]".into()));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config("optimizer.lr must be > 0".into()));
        }
        for (name, b) in [
            ("optimizer.beta1", self.optimizer.beta1),
            ("optimizer.beta2", self.optimizer.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.clustering.eps <= 0.0 {
            return Err(Error::Config("clustering.eps must be > 0".into()));
        }
        if self.clustering.min_pts == 0 {
            return Err(Error::Config("clustering.min_pts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pruning.target_ratio) {
            return Err(Error::Config(
                "pruning.target_ratio must lie in [0, 1]".into(),
            ));
        }
        if self.pruning.per_event_cap <= 0.0 || self.pruning.per_event_cap > 1.0 {
            return Err(Error::Config(
                "pruning.per_event_cap must lie in (0, 1]".into(),
            ));
        }
        if self.pruning.window < 2 {
            return Err(Error::Config("pruning.window must be >= 2".into()));
        }
        if (self.aggregation.gamma + self.aggregation.delta - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "aggregation.gamma + aggregation.delta must equal 1, got {} + {} = {}",
                self.aggregation.gamma,
                self.aggregation.delta,
                self.aggregation.gamma + self.aggregation.delta
            )));
        }
        if self.aggregation.gamma < 0.0 || self.aggregation.delta < 0.0 {
            return Err(Error::Config(
                "aggregation.gamma and aggregation.delta must be >= 0".into(),
            ));
        }
        if !STRATEGY_NAMES.contains(&self.aggregation.strategy.as_str()) {
            return Err(Error::Config(format!(
                "unknown aggregation.strategy {:?}; known strategies: {}",
                self.aggregation.strategy,
                STRATEGY_NAMES.join(", ")
            )));
        }
        if self.data.validation_batch == 0 {
            return Err(Error::Config("data.validation_batch must be >= 1".into()));
        }
        self.skew_spec().validate()?;
        Ok(())
    }

    /// Runtime network config; the init seed derives from the master seed.
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            input_dim: self.net.input_dim,
            hidden_dims: self.net.hidden_dims.clone(),
            embed_dim: self.net.embed_dim,
            activation: self.net.activation,
            seed: derive_seed(self.seed, &[stream::NET_INIT]),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.losses.alpha,
            beta: self.losses.beta,
            gamma_ca: self.losses.gamma_ca,
            delta_kl: self.losses.delta_kl,
            k_hard: self.losses.k_hard,
        }
    }

    pub fn skew_spec(&self) -> SkewSpec {
        SkewSpec {
            input_dim: self.net.input_dim,
            identities_min: self.data.identities_min,
            identities_max: self.data.identities_max,
            images_per_identity_min: self.data.images_per_identity_min,
            images_per_identity_max: self.data.images_per_identity_max,
            cameras_min: self.data.cameras_min,
            cameras_max: self.data.cameras_max,
            camera_shift: self.data.camera_shift,
            noise_scale: self.data.noise_scale,
            holdout_fraction: self.data.holdout_fraction,
            seed: derive_seed(self.seed, &[stream::DATA]),
        }
    }

    pub fn crr_state(&self) -> CrrState {
        CrrState::new(
            self.pruning.acc_threshold,
            self.pruning.delta_rd,
            self.pruning.delta_ep,
            self.pruning.window,
        )
    }

    pub fn controller_state(&self) -> PruneControllerState {
        PruneControllerState::new(
            self.pruning.target_ratio,
            self.pruning.per_event_cap,
            self.pruning.eval_epochs_max,
        )
    }
}

fn rewrap(e: Error) -> Error {
    Error::Config(e.to_string())
}
