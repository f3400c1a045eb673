use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use crabloop::control::{
    evaluation_seed, export_log_csv, fom_trace_csv, map_landscape, read_log_lenient, resume, run_closed_loop,
    Bench, ControlError, IterationRecord, Mode, Phase, RunConfig, Status, LOG_FILE,
};
use crabloop::plant::QUASI_ADIABATIC;
use crabloop::tof::{bimodal_fit, fom_from_thermal_fractions, DensityProfile, TofError};
use crabloop::waveform::{ControlField, ExponentialRamp};
use serde_json::json;

const EVAL_FILE: &str = "eval_ramp.jsonl";
const FIT_FILE: &str = "fit_result.json";
const LANDSCAPE_JSON: &str = "landscape.json";
const SEED_VAR: &str = "CRABLOOP_SEED";

#[derive(Parser)]
#[command(name = "crabloop", version, about = "Closed-loop optimization of lattice loading ramps on a simulated Bose-Hubbard plant")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration; built-in defaults for the mode when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
    /// Dotted-key override, e.g. optimizer.max_evals=5 (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    QuasiAdiabatic,
    InitialGuess,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    /// Every log field, one row per record.
    Records,
    /// FOM and running best versus iteration.
    Trace,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed loop and write log, report, optimal waveform and FOM trace.
    Optimize {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from an existing log in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Brute-force (delta_t, tau) map of the exponential ramp family.
    Map {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate one exponential ramp and record it as a reference shot.
    EvalRamp {
        #[command(flatten)]
        run: RunArgs,
        /// Preset ramp; ignored when --delta-t-ms and --tau-ms are given.
        #[arg(long, value_enum, default_value = "quasi-adiabatic")]
        reference: Reference,
        #[arg(long, requires = "tau_ms", allow_hyphen_values = true)]
        delta_t_ms: Option<f64>,
        #[arg(long, requires = "delta_t_ms", allow_hyphen_values = true)]
        tau_ms: Option<f64>,
    },
    /// Bimodal fit of a 1D time-of-flight profile (CSV with header x,n).
    FitTof {
        profile: PathBuf,
        /// Output directory for the fit record.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Readout noise level used by the censored-noise residual.
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        /// Thermal fraction before loading; adds the FOM TF/TF_i to the record.
        #[arg(long)]
        initial_thermal_fraction: Option<f64>,
    },
    /// Plot-ready CSV of an iteration log.
    Export {
        log: PathBuf,
        #[arg(long, value_enum, default_value = "records")]
        format: ExportFormat,
        /// Destination file; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("`{s}` is not KEY=VALUE"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// A failure with its exit code and a machine-readable kind.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    path: Option<PathBuf>,
}

impl Failure {
    fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        Self { code, kind, message: message.into(), path: None }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        Self { path: Some(path.to_path_buf()), ..Self::new(3, "io", e.to_string()) }
    }

    fn config(e: ControlError) -> Self {
        let path = match &e {
            ControlError::Io { path, .. } => Some(path.clone()),
            _ => None,
        };
        Self { path, ..Self::new(2, "config", e.to_string()) }
    }

    fn runtime(e: ControlError) -> Self {
        let (code, kind, path) = match &e {
            ControlError::Config(_) | ControlError::UnknownKey(_) => (2, "config", None),
            ControlError::DigestMismatch { .. } => (2, "digest_mismatch", None),
            ControlError::Io { path, .. } | ControlError::Log { path, .. } => (3, "io", Some(path.clone())),
            ControlError::ReplayDiverged { .. } => (3, "replay_diverged", None),
            _ => (3, "runtime", None),
        };
        Self { path, ..Self::new(code, kind, e.to_string()) }
    }

    fn fit(e: TofError, path: &Path) -> Self {
        let (code, kind) = match e {
            TofError::NonIdentifiable(_) => (4, "fit_not_identifiable"),
            TofError::Csv(_) | TofError::InvalidProfile(_) => (2, "invalid_profile"),
            _ => (3, "fit"),
        };
        Self { path: Some(path.to_path_buf()), ..Self::new(code, kind, e.to_string()) }
    }

    fn record(&self) -> String {
        let mut v = json!({ "error": self.kind, "exit_code": self.code, "message": self.message });
        if let Some(p) = &self.path {
            v["path"] = json!(p.display().to_string());
        }
        v.to_string()
    }
}

fn help_keys() -> String {
    let mut s = String::from("Override keys (--override KEY=VALUE; defaults shown for mode crab_sfmi):\n");
    for (k, v) in RunConfig::new(Mode::CrabSfmi, 0).override_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str(&format!("\n{SEED_VAR} overrides master_seed; an explicit --override master_seed=... wins over it.\n"));
    s.push_str("Exit codes: 0 success, 2 config error, 3 runtime or plant error, 4 fit non-convergence.");
    s
}

fn load_config(run: &RunArgs, default_mode: Mode) -> Result<RunConfig, Failure> {
    let text = match &run.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::config(ControlError::Io { path: p.clone(), source: e }))?,
        None => RunConfig::new(default_mode, 0).to_toml_string(),
    };
    let mut overrides = Vec::new();
    if let Ok(seed) = std::env::var(SEED_VAR) {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| Failure::new(2, "config", format!("{SEED_VAR}=`{seed}` is not a nonnegative integer")))?;
        overrides.push(("master_seed".to_string(), seed.to_string()));
    }
    overrides.extend(run.overrides.iter().cloned());
    let config = RunConfig::with_overrides(&text, &overrides).map_err(Failure::config)?;
    config.check().map_err(Failure::config)?;
    Ok(config)
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn optimize(run: &RunArgs, resume_run: bool) -> Result<(), Failure> {
    let config = load_config(run, Mode::CrabSfmi)?;
    if config.mode == Mode::LandscapeMap {
        return Err(Failure::new(2, "config", "mode landscape_map runs through `crabloop map`"));
    }
    let log = run.out.join(LOG_FILE);
    let outcome = if resume_run && log.exists() {
        resume(&config, &log)
    } else {
        run_closed_loop(&config, &log)
    }
    .map_err(Failure::runtime)?;
    outcome.write_outputs(&config, &run.out).map_err(Failure::runtime)?;
    let report = outcome.summary(&config);
    log::info!("best FOM {} after {} evaluations", report.best_fom, report.evaluations);
    println!("{}", serde_json::to_string(&report).expect("reports serialize"));
    Ok(())
}

fn map(run: &RunArgs) -> Result<(), Failure> {
    let config = load_config(run, Mode::LandscapeMap)?;
    let grid = map_landscape(&config).map_err(Failure::runtime)?;
    grid.write(&run.out).map_err(Failure::runtime)?;
    let json = serde_json::to_string_pretty(&grid).expect("grids serialize") + "\n";
    write_file(&run.out.join(LANDSCAPE_JSON), &json)?;
    for (i, j, why) in &grid.failures {
        log::warn!("cell ({i}, {j}) failed: {why}");
    }
    let min = grid.minimum().map(|(i, j, f)| json!({ "delta_t_ms": grid.delta_t_ms[i], "tau_ms": grid.tau_ms[j], "fom": f }));
    println!("{}", json!({ "minimum": min, "failed_cells": grid.failures.len() }));
    Ok(())
}

fn eval_ramp(run: &RunArgs, reference: Reference, explicit: Option<(f64, f64)>) -> Result<(), Failure> {
    let config = load_config(run, Mode::Exponential2param)?;
    let (label, (dt, tau)) = match (explicit, reference) {
        (Some(p), _) => ("custom", p),
        (None, Reference::QuasiAdiabatic) => ("quasi_adiabatic", QUASI_ADIABATIC),
        (None, Reference::InitialGuess) => ("initial_guess", (config.ramp.delta_t_ms, config.ramp.tau_ms)),
    };
    let ramp = ExponentialRamp::new(config.ramp.s_max_er, dt, tau)
        .map_err(|e| Failure::new(2, "config", e.to_string()))?;
    let bench = Bench::new(&config.plant).map_err(Failure::runtime)?;
    let seed = evaluation_seed(config.master_seed, 0);
    let shot = bench.shot(&ControlField::exponential(ramp), seed).map_err(Failure::runtime)?;
    let record = IterationRecord {
        index: 0,
        phase: Phase::Reference,
        label: Some(label.to_string()),
        params: vec![dt, tau],
        fom: shot.sample.fom,
        fidelity: Some(shot.sample.fidelity),
        energy_excess: Some(shot.sample.energy_excess),
        seed,
        wall_time_ms: shot.duration_ms,
        status: Status::Ok,
        error: None,
        remeasure: false,
        kappa: config.plant.kappa_hbar_per_er_per_ms,
        config_digest: config.digest(),
    };
    let line = record.to_line();
    write_file(&run.out.join(EVAL_FILE), &format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn fit_tof(profile: &Path, out: Option<&Path>, noise_sigma: f64, tf_initial: Option<f64>) -> Result<(), Failure> {
    let file = fs::File::open(profile).map_err(|e| Failure { code: 2, ..Failure::io(profile, e) })?;
    let mut p = DensityProfile::read_csv(BufReader::new(file)).map_err(|e| Failure::fit(e, profile))?;
    p.noise_sigma = noise_sigma;
    let fit = bimodal_fit(&p).map_err(|e| Failure::fit(e, profile))?;
    let mut record: serde_json::Value = serde_json::from_str(&fit.to_record()).expect("fit records are JSON");
    if let Some(tf_i) = tf_initial {
        let fom = fom_from_thermal_fractions(fit.thermal_fraction, tf_i).map_err(|e| Failure::fit(e, profile))?;
        record["fom"] = json!(fom);
    }
    let line = record.to_string();
    if let Some(dir) = out {
        write_file(&dir.join(FIT_FILE), &format!("{line}\n"))?;
    }
    println!("{line}");
    if !fit.converged {
        return Err(Failure { path: Some(profile.to_path_buf()), ..Failure::new(4, "fit_not_converged", "bimodal fit did not converge") });
    }
    Ok(())
}

fn export(log_path: &Path, format: ExportFormat, out: Option<&Path>) -> Result<(), Failure> {
    let records = read_log_lenient(log_path).map_err(Failure::runtime)?;
    let csv = match format {
        ExportFormat::Records => export_log_csv(&records),
        ExportFormat::Trace => fom_trace_csv(&records),
    };
    match out {
        Some(p) => write_file(p, &csv),
        None => io::stdout().write_all(csv.as_bytes()).map_err(|e| Failure::io(Path::new("<stdout>"), e)),
    }
}

fn main() -> ExitCode {
    let keys = help_keys();
    let mut command = Cli::command().after_help(keys.clone());
    for name in ["optimize", "map", "eval-ramp"] {
        command = command.mut_subcommand(name, |c| c.after_help(keys.clone()));
    }
    let matches = command.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match &cli.command {
        Command::Optimize { run, resume } => optimize(run, *resume),
        Command::Map { run } => map(run),
        Command::EvalRamp { run, reference, delta_t_ms, tau_ms } => {
            eval_ramp(run, *reference, delta_t_ms.zip(*tau_ms))
        }
        Command::FitTof { profile, out, noise_sigma, initial_thermal_fraction } => {
            fit_tof(profile, out.as_deref(), *noise_sigma, *initial_thermal_fraction)
        }
        Command::Export { log, format, out } => export(log, *format, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::from(f.code)
        }
    }
}
