//! Multi-seed comparison of configs that differ only in the method under
//! test.

use std::fmt::Write as _;

use fedlora::flcore::Strategy;
use serde::{Deserialize, Serialize};

use crate::config::{DataSection, ExperimentConfig, OutputSection, StrategySection};
use crate::error::CliError;
use crate::experiment::run_experiment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub rank: usize,
    pub heterogeneity: String,
    pub seeds: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std_accuracy: f64,
    /// Total uploaded parameters, averaged over seeds.
    pub uploads: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Welford's running mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let n = values.len();
    let std = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
    (mean, std)
}

/// The config with the compared fields (method and heterogeneity) reset.
fn comparable_part(cfg: &ExperimentConfig) -> ExperimentConfig {
    let defaults = DataSection::default();
    let mut c = cfg.clone();
    c.strategy = StrategySection::default();
    c.output = OutputSection::default();
    c.data.partition = defaults.partition;
    c.data.dirichlet_alpha = defaults.dirichlet_alpha;
    c
}

/// Checks that `configs` differ only in strategy settings and data
/// heterogeneity.
pub fn check_comparable(configs: &[ExperimentConfig]) -> Result<(), CliError> {
    if configs.len() < 2 {
        return Err(CliError::Config("compare needs at least two configs".into()));
    }
    let reference = comparable_part(&configs[0]);
    for (i, c) in configs.iter().enumerate().skip(1) {
        if comparable_part(c) != reference {
            return Err(CliError::Config(format!(
                "config #{i} differs from config #0 outside [strategy] and the data partition"
            )));
        }
    }
    Ok(())
}

/// Runs every config for each seed in `seeds` and tabulates the results.
pub fn compare_suite(configs: &[ExperimentConfig], seeds: &[u64]) -> Result<ComparisonTable, CliError> {
    check_comparable(configs)?;
    if seeds.is_empty() {
        return Err(CliError::Config("compare needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut acc = Vec::with_capacity(seeds.len());
        let mut uploads = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let run = run_experiment(&c, None)?;
            acc.push(run.summary.final_accuracy);
            uploads.push(run.summary.total_uploaded_params as f64);
        }
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        rows.push(ComparisonRow {
            strategy: cfg.strategy.kind,
            rank: cfg.strategy.rank,
            heterogeneity: cfg.heterogeneity(),
            seeds: seeds.len(),
            mean_accuracy,
            std_accuracy,
            uploads: mean_std(&uploads).0,
        });
    }
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    /// Tab-separated, with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("strategy\trank\theterogeneity\tseeds\tmean_accuracy\tstd_accuracy\tuploads\n");
        for r in &self.rows {
            let uploads = if r.uploads.fract() == 0.0 {
                format!("{}", r.uploads as u64)
            } else {
                format!("{:.1}", r.uploads)
            };
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{}",
                r.strategy, r.rank, r.heterogeneity, r.seeds, r.mean_accuracy, r.std_accuracy, uploads
            )
            .expect("writing to a string");
        }
        out
    }
}
