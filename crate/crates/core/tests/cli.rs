use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use qsense::cli::{self, Cli, RunError, EXIT_CONFIG, EXIT_OK};
use qsense::config::RunConfig;

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// Bundled config text with its long settings cut down.
fn small(name: &str, edits: &[(&str, &str)]) -> String {
    let mut text = fs::read_to_string(bundled(name)).unwrap();
    for (from, to) in edits {
        assert!(text.contains(from), "{from} not in {name}");
        text = text.replace(from, to);
    }
    text
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Result<PathBuf, RunError> {
    let cli = Cli::try_parse_from(std::iter::once("qsense").chain(args.iter().copied())).unwrap();
    cli::run(&cli.command)
}

fn status(args: &[&str]) -> i32 {
    cli::main_with_args(std::iter::once("qsense").chain(args.iter().copied()))
}

const PI_EDITS: &[(&str, &str)] = &[("iterations = 4000", "iterations = 40")];

#[test]
fn bundled_configs_validate() {
    for name in ["fig1_pi.toml", "fig1_continuous.toml", "fig2_glass.toml", "fig4_pump.toml", "appendixA_psd_check.toml"] {
        let config = RunConfig::load(&bundled(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        config.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn weights_not_summing_to_one_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let text = small("fig1_pi.toml", &[("weights = [0.45, 0.43, 0.12]", "weights = [0.45, 0.43, 0.22]")]);
    let path = write(dir.path(), "bad.toml", &text);
    let err = run(&["optimize-pi", "--config", path.to_str().unwrap()]).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CONFIG);
    let RunError::Config(e) = err else { panic!("not a config error") };
    assert_eq!(e.key.as_deref(), Some("multitone.weights"));
    let line = text.lines().position(|l| l.starts_with("weights")).unwrap() + 1;
    assert_eq!(e.line, Some(line));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = small("fig1_pi.toml", &[("momentum = 0.95", "momentum = 0.95\nmomentun = 0.9")]);
    let path = write(dir.path(), "typo.toml", &text);
    assert_eq!(status(&["optimize-pi", "--config", path.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn subcommand_must_match_experiment() {
    let path = bundled("fig4_pump.toml");
    assert_eq!(status(&["optimize-pi", "--config", path.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn missing_config_file_is_a_config_error() {
    assert_eq!(status(&["noise-check", "--config", "/nonexistent/qsense.toml"]), EXIT_CONFIG);
    assert_eq!(status(&["noise-check"]), EXIT_CONFIG);
}

#[test]
fn pi_run_writes_outputs_and_replays_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "pi.toml", &small("fig1_pi.toml", PI_EDITS));
    let first = dir.path().join("first");
    assert_eq!(status(&["optimize-pi", "--config", path.to_str().unwrap(), "--out", first.to_str().unwrap()]), EXIT_OK);
    for f in ["manifest.json", "trajectory.csv", "record.json", "summary.json"] {
        assert!(first.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(first.join("trajectory.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("iteration,eta_inverse,t_1,"));
    assert_eq!(csv.lines().count(), 42);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "optimize_pi");
    assert_eq!(manifest["seeds"]["opt"], 1);

    let second = dir.path().join("second");
    let manifest_path = first.join("manifest.json");
    let args = ["optimize-pi", "--config", manifest_path.to_str().unwrap(), "--out", second.to_str().unwrap(), "--threads", "2"];
    assert_eq!(status(&args), EXIT_OK);
    for f in ["trajectory.csv", "record.json", "summary.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "pi.toml", &small("fig1_pi.toml", PI_EDITS));
    let out = dir.path().join("o");
    run(&["optimize-pi", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "42"]).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["opt"], 42);
    assert_eq!(manifest["config"]["opt"]["seed"], 42);
}

#[test]
fn continuous_run_is_thread_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let text = small(
        "fig1_continuous.toml",
        &[("iterations = 8000", "iterations = 3"), ("pool_size = 20000", "pool_size = 40"), ("minibatch = 100", "minibatch = 8"), ("record_stride = 10", "record_stride = 1")],
    );
    let path = write(dir.path(), "cd.toml", &text);
    let outs: Vec<PathBuf> = ["1", "3"]
        .iter()
        .map(|t| {
            let out = dir.path().join(format!("t{t}"));
            run(&["optimize-continuous", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", t]).unwrap();
            out
        })
        .collect();
    let a = fs::read(outs[0].join("trajectory.csv")).unwrap();
    assert_eq!(a, fs::read(outs[1].join("trajectory.csv")).unwrap());
    let header = String::from_utf8(a).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("iteration,eta_inverse,phi_x_0,phi_y_0,phi_x_1"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(outs[0].join("summary.json")).unwrap()).unwrap();
    assert!(summary["converged_eta_inverse"].as_f64().unwrap() > 0.0);
}

#[test]
fn pump_run_reports_improvement() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "pump.toml", &small("fig4_pump.toml", &[("iterations = 2000", "iterations = 50")]));
    let out = dir.path().join("o");
    run(&["optimize-pump", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["improvement"].as_f64().unwrap() > 1.0);
    assert!(summary["cp_probe_eta_inverse"].as_f64().unwrap() > 0.0);
    let header = fs::read_to_string(out.join("trajectory.csv")).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("iteration,eta_inverse,s_1,"));
}

#[test]
fn glass_analysis_reads_saved_records() {
    let dir = tempfile::tempdir().unwrap();
    let pi = write(dir.path(), "pi.toml", &small("fig1_pi.toml", &[("iterations = 4000", "iterations = 60")]));
    let mut records = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(format!("run{seed}"));
        run(&["optimize-pi", "--config", pi.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed]).unwrap();
        records.push(format!("\"{}\"", out.join("record.json").display()));
    }
    let text = small("fig2_glass.toml", &[("families = [\"pi_pulses\", \"continuous\"]", "families = [\"pi_pulses\"]"), ("runs = 10", "")])
        .replace("[glass]", &format!("[glass]\nrecords = [{}]", records.join(", ")));
    let path = write(dir.path(), "glass.toml", &text);
    let out = dir.path().join("glass");
    run(&["glass-analyze", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]).unwrap();
    let csv = fs::read_to_string(out.join("delta_pi_pulses.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("n,delta_mean,delta_stderr"));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("fit_pi_pulses.json")).unwrap()).unwrap();
    assert!(fit["alpha"].as_f64().is_some());
    assert_eq!(fit["runs"], 2);
}

#[test]
fn glass_records_need_a_single_family() {
    let dir = tempfile::tempdir().unwrap();
    let text = small("fig2_glass.toml", &[("runs = 10", "records = [\"a.json\"]")]);
    let path = write(dir.path(), "glass.toml", &text);
    assert_eq!(status(&["glass-analyze", "--config", path.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn noise_check_writes_psd_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = small("appendixA_psd_check.toml", &[("traces = 4000", "traces = 50"), ("psd_samples = 2000", "psd_samples = 100")]);
    let path = write(dir.path(), "noise.toml", &text);
    let out = dir.path().join("o");
    run(&["noise-check", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]).unwrap();
    let csv = fs::read_to_string(out.join("psd.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("omega,s_value"));
    assert_eq!(csv.lines().count(), 101);
    assert!(out.join("noise_check.json").exists());
}
