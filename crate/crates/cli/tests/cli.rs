use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crabloop::control::{read_log, Mode, Phase, RunConfig};
use crabloop::tof::{synth_profile, uniform_grid, BimodalModel};

fn crabloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crabloop"))
        .args(args)
        .env_remove("CRABLOOP_SEED")
        .output()
        .unwrap()
}

fn small() -> Vec<&'static str> {
    vec!["--override", "plant.sites=3", "--override", "plant.bosons=3", "--override", "plant.step_ms=1"]
}

fn config_path() -> String {
    format!("{}/../../configs/exponential_2param.toml", env!("CARGO_MANIFEST_DIR"))
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(out.stderr.trim_ascii()).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn optimize_writes_four_files_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = config_path();
    let mut args = vec!["optimize", "-c", &cfg, "-o", out, "--override", "optimizer.max_evals=5"];
    args.extend(small());
    let run = crabloop(&args);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let names: Vec<String> = snapshot(dir.path()).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["fom_vs_iteration.csv", "iterations.jsonl", "optimal_waveform.csv", "report.json"]);
    let log = read_log(&dir.path().join("iterations.jsonl")).unwrap();
    assert_eq!(log.len(), 5 + 2);
    assert_eq!(log.iter().filter(|r| r.phase == Phase::Reference).count(), 2);

    let first = snapshot(dir.path());
    assert!(crabloop(&args).status.success());
    assert_eq!(snapshot(dir.path()), first);
}

#[test]
fn optimize_resume_of_a_finished_run_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["optimize", "-o", out, "--override", "optimizer.max_evals=8"];
    args.extend(small());
    assert!(crabloop(&args).status.success());
    let first = snapshot(dir.path());
    args.push("--resume");
    assert!(crabloop(&args).status.success());
    assert_eq!(snapshot(dir.path()), first);
}

#[test]
fn missing_config_names_the_path() {
    let run = crabloop(&["optimize", "-c", "/definitely/not/here.toml", "-o", "/tmp/unused"]);
    assert_eq!(run.status.code(), Some(2));
    let err = stderr_json(&run);
    assert_eq!(err["path"], "/definitely/not/here.toml");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn unknown_override_is_a_config_error() {
    let run = crabloop(&["eval-ramp", "-o", "/tmp/unused", "--override", "plant.depth=3"]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr_json(&run)["message"].as_str().unwrap().contains("plant.depth"));
}

#[test]
fn eval_ramp_records_one_reference_shot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["eval-ramp", "-o", out, "--reference", "quasi-adiabatic"];
    args.extend(small());
    let run = crabloop(&args);
    assert!(run.status.success());
    let log = read_log(&dir.path().join("eval_ramp.jsonl")).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].phase, Phase::Reference);
    assert_eq!(log[0].params, vec![140.0, 30.0]);
    assert_eq!(String::from_utf8(run.stdout).unwrap().trim(), log[0].to_line());
}

#[test]
fn seed_variable_overrides_master_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["eval-ramp", "-o", out];
    args.extend(small());
    let run = Command::new(env!("CARGO_BIN_EXE_crabloop")).args(&args).env("CRABLOOP_SEED", "99").output().unwrap();
    assert!(run.status.success());
    let rec = &read_log(&dir.path().join("eval_ramp.jsonl")).unwrap()[0];
    assert_eq!(rec.seed, crabloop::control::evaluation_seed(99, 0));
}

#[test]
fn fit_tof_recovers_a_synthetic_profile() {
    let dir = tempfile::tempdir().unwrap();
    let model = BimodalModel { n_c0: 1.0, radius: 2.0, n_t0: 0.15, sigma_t: 4.0, x0: 0.3 };
    let p = synth_profile(&model, &uniform_grid(-12.0, 12.0, 401), 0.0, 0).unwrap();
    let csv = dir.path().join("profile.csv");
    p.write_csv(fs::File::create(&csv).unwrap()).unwrap();
    let run = crabloop(&["fit-tof", csv.to_str().unwrap(), "-o", dir.path().to_str().unwrap(), "--initial-thermal-fraction", "0.5"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("fit_result.json")).unwrap()).unwrap();
    let tf = rec["thermal_fraction"].as_f64().unwrap();
    assert!((tf - model.thermal_fraction()).abs() < 1e-6, "{tf}");
    assert!((rec["fom"].as_f64().unwrap() - tf / 0.5).abs() < 1e-15);
}

#[test]
fn fit_tof_refuses_an_unidentifiable_profile() {
    let dir = tempfile::tempdir().unwrap();
    let model = BimodalModel { n_c0: 1.0, radius: 6.0, n_t0: 0.5, sigma_t: 1.0, x0: 0.0 };
    let p = synth_profile(&model, &uniform_grid(-12.0, 12.0, 241), 0.0, 0).unwrap();
    let csv = dir.path().join("narrow.csv");
    p.write_csv(fs::File::create(&csv).unwrap()).unwrap();
    let run = crabloop(&["fit-tof", csv.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(4));
    assert_eq!(stderr_json(&run)["exit_code"], 4);
}

#[test]
fn export_of_an_empty_log_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("empty.jsonl");
    fs::write(&log, "").unwrap();
    let run = crabloop(&["export", log.to_str().unwrap()]);
    assert!(run.status.success());
    let text = String::from_utf8(run.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("index,"));
}

#[test]
fn map_writes_matrix_and_axes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["map", "-o", out, "--override", "landscape.delta_t_count=3", "--override", "landscape.tau_count=2"];
    args.extend(small());
    assert!(crabloop(&args).status.success());
    let matrix = fs::read_to_string(dir.path().join("landscape_fom.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 3);
    assert!(matrix.lines().all(|l| l.split(',').count() == 2));
    let first = snapshot(dir.path());
    assert!(crabloop(&args).status.success());
    assert_eq!(snapshot(dir.path()), first);
}

#[test]
fn help_lists_every_override_key() {
    let run = crabloop(&["optimize", "--help"]);
    let text = String::from_utf8(run.stdout).unwrap();
    for (key, _) in RunConfig::new(Mode::CrabSfmi, 0).override_keys() {
        assert!(text.contains(&format!("  {key} = ")), "missing {key}");
    }
}
