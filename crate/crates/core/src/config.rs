//! Run configuration, read from TOML with every field defaulted.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::PlannerConfig;

/// Which parts of the method are switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Act with the policy's first action instead of planning.
    #[serde(alias = "no-planning")]
    NoPlanning,
    /// No planning and no latent model: 1-step targets on real transitions.
    #[serde(alias = "no-planning-no-model")]
    NoPlanningNoModel,
}

impl Ablation {
    pub fn plans(self) -> bool {
        self == Ablation::Full
    }

    pub fn uses_model(self) -> bool {
        self != Ablation::NoPlanningNoModel
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPlanning => "no-planning",
            Ablation::NoPlanningNoModel => "no-planning-no-model",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "full" => Ok(Ablation::Full),
            "no-planning" => Ok(Ablation::NoPlanning),
            "no-planning-no-model" => Ok(Ablation::NoPlanningNoModel),
            _ => Err(Error::Config(format!(
                "unknown ablation {s:?}; expected full, no-planning or no-planning-no-model"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    #[default]
    Full,
    #[serde(alias = "dynamics-only")]
    DynamicsOnly,
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "full" => Ok(TransferMode::Full),
            "dynamics-only" => Ok(TransferMode::DynamicsOnly),
            _ => Err(Error::Config(format!(
                "unknown transfer mode {s:?}; expected full or dynamics-only"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: String,
    pub demos: Option<PathBuf>,
    pub episodes: usize,
    pub seed: u64,
    /// Save a checkpoint every this many episodes; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub ablation: Ablation,
    /// Planner threads; falls back to `MPAIL2_THREADS`, then all cores.
    pub threads: Option<usize>,
    /// Start from these weights instead of a fresh initialisation.
    pub init_checkpoint: Option<PathBuf>,

    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub ensemble_size: usize,
    pub initial_alpha: f64,

    pub lr: f64,
    pub encoder_lr: f64,
    pub alpha_lr: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub batch_size: usize,
    pub utd: f64,
    pub rho: f64,
    pub beta: f64,
    pub polyak: f64,
    pub value_grad_clip: f64,
    pub policy_grad_clip: f64,
    /// Per-step entropy target; defaults to `-action_dim`.
    pub target_entropy: Option<f64>,

    /// Planner settings; its horizon is always taken from `horizon`.
    pub planner: PlannerConfig,

    pub stop_on_first_success: bool,
    /// Stop once the trailing-window success rate reaches this fraction.
    pub stop_on_success_rate: Option<f64>,
    pub success_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: "push2d".into(),
            demos: None,
            episodes: 400,
            seed: 0,
            checkpoint_every: 0,
            ablation: Ablation::Full,
            threads: None,
            init_checkpoint: None,
            latent_dim: 256,
            hidden: vec![512, 512],
            ensemble_size: 5,
            initial_alpha: 0.1,
            lr: 3e-4,
            encoder_lr: 3e-5,
            alpha_lr: 3e-4,
            lambda: 0.95,
            gamma: 0.99,
            horizon: 7,
            batch_size: 256,
            utd: 1.0,
            rho: 0.95,
            beta: 0.1,
            polyak: 0.01,
            value_grad_clip: 5.0,
            policy_grad_clip: 1.0,
            target_entropy: None,
            planner: PlannerConfig::default(),
            stop_on_first_success: false,
            stop_on_success_rate: None,
            success_window: 25,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: origin.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialising config: {e}")))
    }

    /// Planner settings with the shared horizon applied.
    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            horizon: self.horizon,
            ..self.planner.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("encoder_lr", self.encoder_lr),
            ("alpha_lr", self.alpha_lr),
            ("gamma", self.gamma),
            ("utd", self.utd),
            ("rho", self.rho),
            ("polyak", self.polyak),
            ("value_grad_clip", self.value_grad_clip),
            ("policy_grad_clip", self.policy_grad_clip),
            ("initial_alpha", self.initial_alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) || self.gamma > 1.0 || self.polyak > 1.0 {
            return Err(Error::Config(
                "lambda, gamma and polyak must lie in [0, 1]".into(),
            ));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        if self.horizon == 0 || self.batch_size == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "horizon, batch_size and latent_dim must be positive".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden widths must be non-empty and positive".into(),
            ));
        }
        if self.ensemble_size < 2 {
            return Err(Error::Config(format!(
                "ensemble_size must be at least 2, got {}",
                self.ensemble_size
            )));
        }
        if let Some(r) = self.stop_on_success_rate {
            if !(0.0..=1.0).contains(&r) || self.success_window == 0 {
                return Err(Error::Config(
                    "stop_on_success_rate needs a rate in [0, 1] and a window".into(),
                ));
            }
        }
        self.planner_config().validate()
    }
}
