//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional; missing values take the defaults
//! below. Unknown keys are rejected.
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! d = 32
//! layers = 2
//! modules_per_layer = 2
//! num_classes = 8
//! r_global = 8
//! alpha = 16.0
//! activation = "tanh"          # tanh | relu | identity
//!
//! [data]
//! n_per_class = 300
//! cluster_std = 0.3
//! partition = "dirichlet"      # dirichlet | pathological
//! dirichlet_alpha = 0.5
//! clients = 30
//! test_fraction = 0.1
//!
//! [training]
//! rounds = 50
//! epochs = 5
//! batch_size = 16
//! eta_a = 0.0005
//! b_multiplier = 5.0
//! weight_decay = 0.0
//! participation = 1.0
//!
//! [strategy]
//! kind = "lora_a2"             # fl_lora | ffa_lora | flexlora | hetlora | lora_a2
//! rank = 2
//! budgets = "homogeneous"      # homogeneous | uniform | heavy_tail | normal
//! gamma = 0.99
//! # r_target = 2               # flexlora only; defaults to rank
//! criterion = "contribution"   # contribution | magnitude | importance
//!
//! [dp]
//! enabled = true
//! epsilon = inf
//! clip = 2.0
//!
//! [output]
//! path = "reports/run.ndjson"
//! record_similarity = false
//! ```

use std::path::PathBuf;

use fedlora::data::BudgetKind;
use fedlora::dp::DpConfig;
use fedlora::flcore::{LocalSpec, SimConfig, Strategy, StrategyConfig};
use fedlora::model::{Activation, ModelConfig};
use fedlora::optim::{AdamWConfig, LrPolicy};
use fedlora::ranksel::Criterion;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub training: TrainingSection,
    pub strategy: StrategySection,
    pub dp: DpConfig,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub layers: usize,
    pub modules_per_layer: usize,
    pub num_classes: usize,
    pub r_global: usize,
    pub alpha: f64,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    #[default]
    Dirichlet,
    Pathological,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_per_class: usize,
    pub cluster_std: f64,
    pub partition: PartitionKind,
    pub dirichlet_alpha: f64,
    pub clients: usize,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta_a: f64,
    pub b_multiplier: f64,
    pub weight_decay: f64,
    pub participation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub kind: Strategy,
    pub rank: usize,
    pub budgets: BudgetKind,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_target: Option<usize>,
    pub criterion: Criterion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub path: PathBuf,
    pub record_similarity: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d: m.d,
            layers: m.layers,
            modules_per_layer: m.modules_per_layer,
            num_classes: m.num_classes,
            r_global: m.rank,
            alpha: m.alpha,
            activation: m.activation,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_per_class: 300,
            cluster_std: 0.3,
            partition: PartitionKind::Dirichlet,
            dirichlet_alpha: 0.5,
            clients: 30,
            test_fraction: 0.1,
        }
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        let lr = LrPolicy::default();
        TrainingSection {
            rounds: 50,
            epochs: 5,
            batch_size: 16,
            eta_a: lr.eta_a,
            b_multiplier: lr.b_multiplier,
            weight_decay: 0.0,
            participation: 1.0,
        }
    }
}

impl Default for StrategySection {
    fn default() -> Self {
        let s = StrategyConfig::new(Strategy::LoraA2, 2);
        StrategySection {
            kind: s.kind,
            rank: s.rank,
            budgets: s.budgets,
            gamma: s.gamma,
            r_target: s.r_target,
            criterion: s.criterion,
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            path: PathBuf::from("reports/run.ndjson"),
            record_similarity: false,
        }
    }
}

fn invalid(key: &str, constraint: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {constraint}"))
}

impl ExperimentConfig {
    /// Parses and validates TOML text.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        for (key, v) in [
            ("model.d", m.d),
            ("model.layers", m.layers),
            ("model.modules_per_layer", m.modules_per_layer),
            ("model.num_classes", m.num_classes),
            ("model.r_global", m.r_global),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if m.r_global > m.d {
            return Err(invalid("model.r_global", format!("must satisfy r_G ≤ d = {}", m.d)));
        }
        if !(m.alpha.is_finite() && m.alpha > 0.0) {
            return Err(invalid("model.alpha", "must be positive and finite"));
        }
        let d = &self.data;
        if d.n_per_class == 0 {
            return Err(invalid("data.n_per_class", "must be at least 1"));
        }
        if !(d.cluster_std.is_finite() && d.cluster_std >= 0.0) {
            return Err(invalid("data.cluster_std", "must be finite and non-negative"));
        }
        if d.partition == PartitionKind::Dirichlet && !(d.dirichlet_alpha.is_finite() && d.dirichlet_alpha > 0.0) {
            return Err(invalid("data.dirichlet_alpha", "must be positive and finite"));
        }
        if d.clients == 0 {
            return Err(invalid("data.clients", "must be at least 1"));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(invalid("data.test_fraction", "must lie in (0, 1)"));
        }
        let t = &self.training;
        if t.rounds == 0 {
            return Err(invalid("training.rounds", "must satisfy T ≥ 1"));
        }
        if t.epochs == 0 {
            return Err(invalid("training.epochs", "must satisfy E ≥ 1"));
        }
        if t.batch_size == 0 {
            return Err(invalid("training.batch_size", "must be at least 1"));
        }
        if !(t.eta_a.is_finite() && t.eta_a >= 0.0) {
            return Err(invalid("training.eta_a", "must be finite and non-negative"));
        }
        if !(t.b_multiplier.is_finite() && t.b_multiplier > 0.0) {
            return Err(invalid("training.b_multiplier", "must be positive and finite"));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(invalid("training.weight_decay", "must be finite and non-negative"));
        }
        if !(t.participation > 0.0 && t.participation <= 1.0) {
            return Err(invalid("training.participation", "must lie in (0, 1]"));
        }
        let s = &self.strategy;
        if s.rank == 0 {
            return Err(invalid("strategy.rank", "must be at least 1"));
        }
        if s.rank > m.r_global {
            return Err(invalid(
                "strategy.rank",
                format!(
                    "must satisfy r ≤ r_G (rank = {}, model.r_global = {})",
                    s.rank, m.r_global
                ),
            ));
        }
        if !(s.gamma > 0.0 && s.gamma <= 1.0) {
            return Err(invalid("strategy.gamma", "must lie in (0, 1]"));
        }
        if let Some(rt) = s.r_target {
            if rt == 0 || rt > s.rank {
                return Err(invalid("strategy.r_target", format!("must lie in 1..={}", s.rank)));
            }
        }
        if self.dp.epsilon.is_nan() || self.dp.epsilon <= 0.0 {
            return Err(invalid("dp.epsilon", "must be positive (or inf)"));
        }
        if !(self.dp.clip.is_finite() && self.dp.clip > 0.0) {
            return Err(invalid("dp.clip", "must be positive and finite"));
        }
        self.sim_config().validate().map_err(CliError::from)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.model.d,
            layers: self.model.layers,
            modules_per_layer: self.model.modules_per_layer,
            num_classes: self.model.num_classes,
            rank: self.model.r_global,
            alpha: self.model.alpha,
            activation: self.model.activation,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            model: self.model_config(),
            strategy: StrategyConfig {
                kind: self.strategy.kind,
                rank: self.strategy.rank,
                budgets: self.strategy.budgets,
                gamma: self.strategy.gamma,
                r_target: self.strategy.r_target,
                criterion: self.strategy.criterion,
            },
            local: LocalSpec {
                epochs: self.training.epochs,
                batch_size: self.training.batch_size,
                lr: LrPolicy {
                    eta_a: self.training.eta_a,
                    b_multiplier: self.training.b_multiplier,
                },
                adamw: AdamWConfig {
                    weight_decay: self.training.weight_decay,
                    ..AdamWConfig::default()
                },
            },
            dp: self.dp,
            participation: self.training.participation,
            record_similarity: self.output.record_similarity,
        }
    }

    /// Short label of the data split, e.g. `dir(0.05)`.
    pub fn heterogeneity(&self) -> String {
        match self.data.partition {
            PartitionKind::Dirichlet => format!("dir({})", self.data.dirichlet_alpha),
            PartitionKind::Pathological => "pathological".to_string(),
        }
    }
}
