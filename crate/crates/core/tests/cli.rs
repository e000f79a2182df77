//! End-to-end exercises of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stockdiff"))
}

fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const FIXTURE: &[&str] = &[
    "--n_stocks", "4",
    "--n_clusters", "2",
    "--t_len", "90",
    "--window", "8",
    "--d_model", "8",
    "--head_dim", "8",
    "--n_masked_heads", "2",
    "--n_unmasked_heads", "1",
    "--n_encoder_layers", "1",
    "--ff_dim", "16",
    "--emb_dim", "8",
    "--dilations", "1,2",
    "--k_steps", "8",
    "--batch_size", "8",
    "--lr", "0.005",
    "--n_samples", "6",
    "--portfolio_k", "2",
    "--seed", "11",
];

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut gen_args = vec!["gen-data"];
    gen_args.extend_from_slice(FIXTURE);
    run_ok(dir, &gen_args);
    assert!(dir.join("data/S00.csv").is_file());
    assert!(dir.join("relations.csv").is_file());
    assert!(dir.join("out/manifest.json").is_file());

    let mut train_args = vec!["train", "--epochs", "5"];
    train_args.extend_from_slice(FIXTURE);
    run_ok(dir, &train_args);
    assert!(dir.join("out/best.ckpt").is_file());
    assert!(dir.join("out/epoch_0.ckpt").is_file());

    // epoch-average losses from the JSONL log must decrease over the first
    // five epochs
    let log = std::fs::read_to_string(dir.join("out/train_log.jsonl")).unwrap();
    let mut sums = vec![0.0f64; 5];
    let mut counts = vec![0usize; 5];
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let epoch = v["epoch"].as_u64().unwrap() as usize;
        sums[epoch] += v["loss"].as_f64().unwrap();
        counts[epoch] += 1;
        assert!(v["k_hist"].is_object());
        assert!(v["lr"].as_f64().unwrap() > 0.0);
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| s / *c as f64)
        .collect();
    for e in 1..5 {
        assert!(
            means[e] < means[e - 1],
            "epoch losses not decreasing: {means:?}"
        );
    }

    let mut sample_args = vec!["sample"];
    sample_args.extend_from_slice(FIXTURE);
    run_ok(dir, &sample_args);
    assert!(dir.join("out/forecasts.json").is_file());
    assert!(dir.join("out/samples/S00.csv").is_file());

    let mut eval_args = vec!["eval"];
    eval_args.extend_from_slice(FIXTURE);
    let out = run_ok(dir, &eval_args);
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("eval prints the metric report as JSON");
    for key in ["accuracy", "f1", "mcc", "crps", "sharpe", "irr", "n_days", "k"] {
        assert!(report.get(key).is_some(), "metric report missing {key}");
    }
    assert!(dir.join("out/metrics.json").is_file());

    let mut bt_args = vec!["backtest"];
    bt_args.extend_from_slice(FIXTURE);
    run_ok(dir, &bt_args);
    assert!(dir.join("out/trades.csv").is_file());
    assert!(dir.join("out/ledger.json").is_file());
}

#[test]
fn gen_data_is_byte_identical_for_the_same_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for run in ["a", "b"] {
        run_ok(
            dir,
            &[
                "gen-data",
                "--n_stocks", "4",
                "--t_len", "60",
                "--seed", "7",
                "--data_dir", &format!("d_{run}"),
                "--relations_file", &format!("r_{run}.csv"),
                "--out_dir", &format!("o_{run}"),
            ],
        );
    }
    for f in ["S00.csv", "S01.csv", "S02.csv", "S03.csv"] {
        let a = std::fs::read(dir.join("d_a").join(f)).unwrap();
        let b = std::fs::read(dir.join("d_b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical seeds");
    }
    let a = std::fs::read(dir.join("r_a.csv")).unwrap();
    let b = std::fs::read(dir.join("r_b.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_without_a_checkpoint_is_a_usage_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run_ok(dir, &["gen-data", "--n_stocks", "4", "--t_len", "60"]);
    let out = bin()
        .current_dir(dir)
        .args(["eval", "--checkpoint", "nowhere.ckpt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere.ckpt"), "stderr was: {err}");
    assert_eq!(err.trim().lines().count(), 1, "error must be one line: {err}");
}

#[test]
fn bad_usage_exits_with_code_two() {
    for args in [
        vec!["frobnicate"],
        vec!["train", "--no_such_key", "1"],
        vec!["train", "--lr"],
        vec!["train", "--lr", "-3"],
        vec![],
    ] {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "args {args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn report_dir_env_var_overrides_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = bin()
        .current_dir(dir)
        .env("STOCKDIFF_REPORT_DIR", "env_reports")
        .args(["gen-data", "--n_stocks", "4", "--t_len", "60"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("env_reports/manifest.json").is_file());
}

#[test]
fn config_file_plus_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("run.cfg"),
        "[data]\nn_stocks = 5\nt_len = 70\n\n[training]\nseed = 3\n",
    )
    .unwrap();
    run_ok(
        dir,
        &["gen-data", "--config", "run.cfg", "--n_stocks", "6"],
    );
    // the flag wins over the file: six symbol files
    for i in 0..6 {
        assert!(dir.join(format!("data/S{i:02}.csv")).is_file());
    }
    assert!(!dir.join("data/S06.csv").exists());
}
