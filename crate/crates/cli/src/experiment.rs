//! Building a simulation from a config and running it to completion.
//!
//! Output is newline-delimited JSON: one `{"type":"round", ...}` record per
//! round with the fields of [`RoundReport`], then one `{"type":"summary", ...}`
//! record. Nothing time- or host-dependent is written, so a rerun with the
//! same config and seed reproduces the file byte for byte.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedlora::data::{dirichlet_partition, gen_synthetic, pathological_partition, Dataset, Shard};
use fedlora::flcore::{RoundOutcome, Simulation, Strategy};
use fedlora::linalg::{tags, Rng};
use fedlora::metrics::RoundReport;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PartitionKind};
use crate::error::CliError;

/// Environment variable that redirects run output into a directory.
pub const OUT_DIR_ENV: &str = "FEDLORA_OUT_DIR";

/// Accuracy of the final summary is averaged over this many last rounds.
pub const FINAL_WINDOW: usize = 5;

/// Train/test data and client shards for a config.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<Shard>,
}

pub fn build_data(cfg: &ExperimentConfig) -> Result<ExperimentData, CliError> {
    let seed = cfg.seed;
    let d = &cfg.data;
    let full = gen_synthetic(
        cfg.model.num_classes,
        cfg.model.d,
        d.n_per_class,
        d.cluster_std,
        &mut Rng::derive(seed, &[tags::DATA]),
    )?;
    let (train_idx, test_idx) = full.stratified_split(d.test_fraction, &mut Rng::derive(seed, &[tags::SPLIT]))?;
    let train = full.subset(&train_idx);
    let test = full.subset(&test_idx);
    let shards = match d.partition {
        PartitionKind::Dirichlet => dirichlet_partition(
            &train,
            d.clients,
            d.dirichlet_alpha,
            &mut Rng::derive(seed, &[tags::PARTITION]),
        )?,
        PartitionKind::Pathological => pathological_partition(&train, d.clients)?,
    };
    if let Some(s) = shards.iter().find(|s| s.is_empty()) {
        return Err(CliError::Config(format!(
            "data: client {} receives no samples under this partition (check data.clients against model.num_classes)",
            s.client_id
        )));
    }
    Ok(ExperimentData { train, test, shards })
}

pub fn build_simulation(cfg: &ExperimentConfig) -> Result<Simulation, CliError> {
    cfg.validate()?;
    let data = build_data(cfg)?;
    Ok(Simulation::new(cfg.sim_config(), &data.train, data.test, data.shards)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub rank: usize,
    pub r_global: usize,
    pub heterogeneity: String,
    pub seed: u64,
    pub rounds: usize,
    /// Mean test accuracy over the last rounds (see [`FINAL_WINDOW`]).
    pub final_accuracy: f64,
    pub total_uploaded_params: u64,
    pub total_index_metadata: u64,
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

fn json_line<T: Serialize>(kind: &'static str, body: &T) -> String {
    serde_json::to_string(&Tagged { kind, body }).expect("reports serialise")
}

pub fn round_line(report: &RoundReport) -> String {
    json_line("round", report)
}

pub fn summary_line(summary: &RunSummary) -> String {
    json_line("summary", summary)
}

pub fn summarize(cfg: &ExperimentConfig, reports: &[RoundReport]) -> RunSummary {
    let tail = &reports[reports.len().saturating_sub(FINAL_WINDOW)..];
    let final_accuracy = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|r| r.test_accuracy).sum::<f64>() / tail.len() as f64
    };
    RunSummary {
        strategy: cfg.strategy.kind,
        rank: cfg.strategy.rank,
        r_global: cfg.model.r_global,
        heterogeneity: cfg.heterogeneity(),
        seed: cfg.seed,
        rounds: reports.len(),
        final_accuracy,
        total_uploaded_params: reports.last().map_or(0, |r| r.cumulative_uploaded_params),
        total_index_metadata: reports.iter().map(|r| r.index_metadata).sum(),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    pub summary: RunSummary,
}

/// Runs every round, calling `observe` after each one.
pub fn run_with(
    cfg: &ExperimentConfig,
    mut observe: impl FnMut(&RoundOutcome) -> Result<(), CliError>,
) -> Result<RunOutput, CliError> {
    let mut sim = build_simulation(cfg)?;
    let mut reports = Vec::with_capacity(cfg.training.rounds);
    for _ in 0..cfg.training.rounds {
        let outcome = sim.run_round()?;
        observe(&outcome)?;
        reports.push(outcome.report);
    }
    let summary = summarize(cfg, &reports);
    Ok(RunOutput { reports, summary })
}

/// Runs `cfg` and, if `out` is given, writes the NDJSON log there.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutput, CliError> {
    let mut writer = match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };
    let run = run_with(cfg, |outcome| {
        if let Some((path, w)) = writer.as_mut() {
            writeln!(w, "{}", round_line(&outcome.report)).map_err(|e| CliError::io(*path, e))?;
        }
        Ok(())
    })?;
    if let Some((path, mut w)) = writer {
        writeln!(w, "{}", summary_line(&run.summary)).map_err(|e| CliError::io(path, e))?;
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    Ok(run)
}

/// Output location: an explicit path wins, then `FEDLORA_OUT_DIR` (keeping
/// the configured file name), then the config's own path.
pub fn resolve_output(cfg: &ExperimentConfig, explicit: Option<&Path>, env_dir: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match env_dir {
        Some(dir) => dir.join(cfg.output.path.file_name().unwrap_or_else(|| "run.ndjson".as_ref())),
        None => cfg.output.path.clone(),
    }
}

/// Writes the train/test sets and the shard index lists of `cfg` to `dir`.
pub fn export_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let data = build_data(cfg)?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut shards = String::new();
    for s in &data.shards {
        let ids: Vec<String> = s.indices.iter().map(usize::to_string).collect();
        shards.push_str(&format!("{}\t{}\n", s.client_id, ids.join(" ")));
    }
    let files = [
        ("train.txt", data.train.to_text()),
        ("test.txt", data.test.to_text()),
        ("shards.tsv", shards),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
