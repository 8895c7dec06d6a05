use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedlora_cli::compare::compare_suite;
use fedlora_cli::config::ExperimentConfig;
use fedlora_cli::error::{CliError, EXIT_OK};
use fedlora_cli::experiment::{export_data, resolve_output, run_experiment, OUT_DIR_ENV};
use fedlora_cli::presets::{preset, PRESETS};

#[derive(Parser)]
#[command(name = "fedlora", version, about = "Federated LoRA fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its NDJSON log.
    Run {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output file (takes precedence over FEDLORA_OUT_DIR and the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every *.toml in a directory over several seeds and print a table.
    Compare {
        config_dir: PathBuf,
        /// Number of seeds, counting up from each config's seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a canned config as TOML.
    GenConfig {
        /// Preset name; `list` shows them all.
        preset: String,
    },
    /// Write the train/test data and client shards a config would use.
    ExportData {
        config: PathBuf,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    ExperimentConfig::parse(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let env_dir = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
            let path = resolve_output(&cfg, out.as_deref(), env_dir.as_deref());
            let run = run_experiment(&cfg, Some(&path))?;
            let s = &run.summary;
            println!(
                "{} rank {} {} seed {}: final accuracy {:.4}, uploaded {} parameters -> {}",
                s.strategy,
                s.rank,
                s.heterogeneity,
                s.seed,
                s.final_accuracy,
                s.total_uploaded_params,
                path.display()
            );
        }
        Command::Compare { config_dir, seeds, out } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&config_dir)
                .map_err(|e| CliError::io(&config_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "toml"))
                .collect();
            paths.sort();
            let configs = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
            let base = configs.first().map_or(0, |c| c.seed);
            let seed_list: Vec<u64> = (0..seeds).map(|i| base + i).collect();
            let table = compare_suite(&configs, &seed_list)?.to_tsv();
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(|e| CliError::io(&path, e))?;
            }
        }
        Command::GenConfig { preset: name } => {
            if name == "list" {
                for (n, about) in PRESETS {
                    println!("{n}\t{about}");
                }
            } else {
                print!("{}", preset(&name)?.to_toml());
            }
        }
        Command::ExportData { config, out } => {
            for path in export_data(&load(&config)?, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
