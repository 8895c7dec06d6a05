use std::path::Path;
use std::process::Command;

use fedlora::flcore::Strategy;
use fedlora_cli::compare::compare_suite;
use fedlora_cli::config::ExperimentConfig;
use fedlora_cli::experiment::{resolve_output, run_experiment};
use fedlora_cli::presets::preset;

fn small(kind: Strategy) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model.d = 8;
    c.model.num_classes = 4;
    c.model.r_global = 4;
    c.data.n_per_class = 40;
    c.data.clients = 4;
    c.training.rounds = 4;
    c.training.epochs = 1;
    c.strategy.kind = kind;
    c.strategy.rank = 2;
    c
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedlora"))
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn same_seed_gives_byte_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    for kind in Strategy::ALL {
        let cfg = small(kind);
        let a = dir.path().join(format!("{kind}-a.ndjson"));
        let b = dir.path().join(format!("{kind}-b.ndjson"));
        run_experiment(&cfg, Some(&a)).unwrap();
        run_experiment(&cfg, Some(&b)).unwrap();
        let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{kind}");
        let text = String::from_utf8(x).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), cfg.training.rounds + 1);
        assert!(lines.last().unwrap().contains("\"type\":\"summary\""));
    }
}

#[test]
fn record_field_set_is_stable_per_strategy() {
    for kind in Strategy::ALL {
        let run = run_experiment(&small(kind), None).unwrap();
        let keys: Vec<Vec<String>> = run
            .reports
            .iter()
            .map(|r| {
                let v = serde_json::to_value(r).unwrap();
                let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
                k.sort();
                k
            })
            .collect();
        assert!(keys.windows(2).all(|w| w[0] == w[1]), "{kind}");
        assert!(run.reports.iter().all(|r| r.uploaded_params > 0));
    }
}

#[test]
fn ffa_uploads_half_of_fl_lora() {
    let fl = run_experiment(&small(Strategy::FlLora), None).unwrap();
    let ffa = run_experiment(&small(Strategy::FfaLora), None).unwrap();
    assert_eq!(2 * ffa.summary.total_uploaded_params, fl.summary.total_uploaded_params);
}

#[test]
fn summary_averages_the_last_five_rounds() {
    let mut cfg = small(Strategy::FlLora);
    cfg.training.rounds = 7;
    let run = run_experiment(&cfg, None).unwrap();
    let tail = &run.reports[2..];
    let want = tail.iter().map(|r| r.test_accuracy).sum::<f64>() / 5.0;
    assert!((run.summary.final_accuracy - want).abs() < 1e-15);
    let total: u64 = run.reports.iter().map(|r| r.uploaded_params).sum();
    assert_eq!(run.summary.total_uploaded_params, total);
}

#[test]
fn compare_identical_configs_gives_identical_rows() {
    let cfg = small(Strategy::LoraA2);
    let table = compare_suite(&[cfg.clone(), cfg], &[1, 2]).unwrap();
    let (a, b) = (&table.rows[0], &table.rows[1]);
    assert_eq!(a, b);
    let tsv = table.to_tsv();
    assert!(tsv.starts_with("strategy\trank\theterogeneity"));
    assert!(tsv.lines().next().unwrap().contains("uploads"));
}

#[test]
fn output_resolution_order() {
    let cfg = small(Strategy::FlLora);
    let env = Path::new("/tmp/env-dir");
    assert_eq!(
        resolve_output(&cfg, Some(Path::new("x.ndjson")), Some(env)),
        Path::new("x.ndjson")
    );
    assert_eq!(resolve_output(&cfg, None, Some(env)), env.join("run.ndjson"));
    assert_eq!(resolve_output(&cfg, None, None), cfg.output.path);
}

#[test]
fn binary_run_respects_out_dir_env_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", &small(Strategy::FfaLora));
    let out_dir = dir.path().join("out");
    let status = bin()
        .arg("run")
        .arg(&config)
        .args(["--seed", "5"])
        .env("FEDLORA_OUT_DIR", &out_dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(out_dir.join("run.ndjson")).unwrap();
    assert!(text.lines().last().unwrap().contains("\"seed\":5"));
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[strategy]\nrank = 9\n").unwrap();
    let out = bin().arg("run").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("r ≤ r_G"));
    let missing = bin().arg("run").arg(dir.path().join("none.toml")).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    let unknown = bin().args(["gen-config", "nope"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn binary_gen_config_output_parses_back() {
    for name in ["default", "extreme-dir001-rank1", "pathological-k8"] {
        let out = bin().args(["gen-config", name]).output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        let cfg = ExperimentConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
        assert_eq!(cfg, preset(name).unwrap());
    }
}

#[test]
fn binary_compare_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("suite");
    std::fs::create_dir(&configs).unwrap();
    write_config(&configs, "a.toml", &small(Strategy::FlLora));
    write_config(&configs, "b.toml", &small(Strategy::LoraA2));
    let table = dir.path().join("table.tsv");
    let out = bin()
        .arg("compare")
        .arg(&configs)
        .args(["--seeds", "2", "--out"])
        .arg(&table)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("fl_lora") && text.contains("lora_a2"));

    let mut other = small(Strategy::FfaLora);
    other.training.epochs = 2;
    write_config(&configs, "c.toml", &other);
    let out = bin().arg("compare").arg(&configs).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let config = write_config(dir.path(), "x.toml", &small(Strategy::FlLora));
    let data_dir = dir.path().join("data");
    let out = bin()
        .arg("export-data")
        .arg(&config)
        .arg("--out")
        .arg(&data_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let train =
        fedlora::data::Dataset::from_text(&std::fs::read_to_string(data_dir.join("train.txt")).unwrap()).unwrap();
    let shards = std::fs::read_to_string(data_dir.join("shards.tsv")).unwrap();
    let assigned: usize = shards
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().split(' ').count())
        .sum();
    assert_eq!(assigned, train.len());
}
