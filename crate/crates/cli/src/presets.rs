//! Canned configurations.

use fedlora::dp::DpConfig;
use fedlora::flcore::Strategy;

use crate::config::{ExperimentConfig, PartitionKind};
use crate::error::CliError;

pub const PRESETS: &[(&str, &str)] = &[
    (
        "default",
        "all defaults: 30 clients, 50 rounds, 5 local epochs, LoRA-A2 at budget 2",
    ),
    (
        "extreme-dir001-rank1",
        "LoRA-A2 at rank budget 1 of r_G = 8 under Dir(0.01), 30 clients, 50 rounds",
    ),
    (
        "hetero-dir005-rank1",
        "8 classes, 20 clients, Dir(0.05), T = 40, E = 3, budget 1 of 8",
    ),
    ("near-iid-rank1", "as hetero-dir005-rank1 but Dir(10)"),
    (
        "pathological-k8",
        "8 clients holding class pairs, LoRA-A2 budget 1 of 8, similarity recorded",
    ),
    (
        "dp-eps1",
        "20 clients, Dir(0.01), budget 2 of 8, Laplace noise at epsilon = 1, C = 2",
    ),
    (
        "ablation-rank2",
        "Dir(0.05), rank 2 = r_G: alternating freeze without rank selection",
    ),
];

/// 8 classes, `d = 32`, 20 clients, `Dir(0.05)`, 40 rounds of 3 epochs,
/// rank budget 1 of `r_G = 8`.
pub fn hetero_rank1() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.clients = 20;
    c.data.dirichlet_alpha = 0.05;
    c.training.rounds = 40;
    c.training.epochs = 3;
    c.strategy.rank = 1;
    c.output.path = "reports/hetero-dir005-rank1.ndjson".into();
    c
}

pub fn preset(name: &str) -> Result<ExperimentConfig, CliError> {
    let mut c = match name {
        "default" => ExperimentConfig::default(),
        "extreme-dir001-rank1" => {
            let mut c = ExperimentConfig::default();
            c.data.dirichlet_alpha = 0.01;
            c.strategy.rank = 1;
            c
        }
        "hetero-dir005-rank1" => hetero_rank1(),
        "near-iid-rank1" => {
            let mut c = hetero_rank1();
            c.data.dirichlet_alpha = 10.0;
            c
        }
        "pathological-k8" => {
            let mut c = hetero_rank1();
            c.data.partition = PartitionKind::Pathological;
            c.data.clients = 8;
            c.output.record_similarity = true;
            c
        }
        "dp-eps1" => {
            let mut c = hetero_rank1();
            c.data.dirichlet_alpha = 0.01;
            c.strategy.rank = 2;
            c.dp = DpConfig::with_epsilon(1.0, 2.0);
            c
        }
        "ablation-rank2" => {
            let mut c = hetero_rank1();
            c.model.r_global = 2;
            c.strategy.rank = 2;
            c.strategy.kind = Strategy::LoraA2;
            c
        }
        other => {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            return Err(CliError::Config(format!(
                "unknown preset `{other}` (available: {})",
                names.join(", ")
            )));
        }
    };
    if name != "hetero-dir005-rank1" {
        c.output.path = format!("reports/{name}.ndjson").into();
    }
    Ok(c)
}
