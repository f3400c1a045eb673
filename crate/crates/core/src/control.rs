//! The closed loop: run configuration, reference shots, the simplex-driven
//! optimization with an append-only iteration log, resume by replay, and
//! brute-force landscape maps.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::optimizer::{
    minimize_with_context, Bounds, EvalContext, OptimizerError, OptimizerOptions, OptimumReport, SearchPhase,
};
use crate::plant::{
    adiabatic_ramp_down, evaluate_with, Boundary, DepthMapping, FomSample, HubbardConfig, LatticeModel,
    PlantError, PlantProtocol, RecoilContext, QUASI_ADIABATIC,
};
use crate::waveform::{
    sample_waveform, ControlField, CrabCorrection, ExponentialRamp, FieldError, FrequencyPolicy, Waveform,
};

/// Largest landscape grid per axis.
pub const MAX_GRID: usize = 64;

pub const LOG_FILE: &str = "iterations.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const WAVEFORM_FILE: &str = "optimal_waveform.csv";
pub const TRACE_FILE: &str = "fom_vs_iteration.csv";
pub const LANDSCAPE_FILE: &str = "landscape_fom.csv";
pub const LANDSCAPE_DT_FILE: &str = "landscape_delta_t_ms.csv";
pub const LANDSCAPE_TAU_FILE: &str = "landscape_tau_ms.csv";

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("log {path} line {line}: {message}")]
    Log { path: PathBuf, line: usize, message: String },
    #[error("log was written by a different configuration (digest {found}, expected {expected})")]
    DigestMismatch { expected: String, found: String },
    #[error("replay diverged at record {index}: {message}")]
    ReplayDiverged { index: usize, message: String },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ControlError + '_ {
    move |source| ControlError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Four-or-more-parameter CRAB correction of a fixed exponential ramp.
    CrabSfmi,
    /// Optimization of the exponential ramp's `(delta_t, tau)`.
    #[serde(rename = "exponential_2param")]
    Exponential2param,
    /// Brute-force `(delta_t, tau)` map.
    LandscapeMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSection {
    pub sites: usize,
    pub bosons: usize,
    pub boundary: Boundary,
    pub u_scale: f64,
    pub s_min_er: f64,
    /// Control millisecond in units of `hbar / E_r`.
    pub kappa_hbar_per_er_per_ms: f64,
    pub wavelength_nm: f64,
    pub noise_sigma: f64,
    pub round_trip: bool,
    pub hold_ms: f64,
    /// Waveform sampling interval.
    pub step_ms: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        let h = HubbardConfig::default();
        let DepthMapping::TightBinding { u_scale, s_min } = h.mapping;
        Self {
            sites: h.sites,
            bosons: h.bosons,
            boundary: h.boundary,
            u_scale,
            s_min_er: s_min,
            kappa_hbar_per_er_per_ms: h.time_scale,
            wavelength_nm: h.recoil.wavelength_nm,
            noise_sigma: 0.01,
            round_trip: false,
            hold_ms: crate::plant::DEFAULT_HOLD_MS,
            step_ms: 0.25,
        }
    }
}

impl PlantSection {
    pub fn hubbard(&self) -> HubbardConfig {
        HubbardConfig {
            sites: self.sites,
            bosons: self.bosons,
            boundary: self.boundary,
            mapping: DepthMapping::TightBinding { u_scale: self.u_scale, s_min: self.s_min_er },
            time_scale: self.kappa_hbar_per_er_per_ms,
            recoil: RecoilContext { wavelength_nm: self.wavelength_nm, ..RecoilContext::default() },
        }
    }

    /// Samples for a ramp of length `duration_ms`.
    pub fn n_steps(&self, duration_ms: f64) -> usize {
        ((duration_ms / self.step_ms).ceil() as usize + 1).max(2)
    }
}

/// The exponential base ramp (and, in two-parameter mode, the initial guess).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RampSection {
    pub s_max_er: f64,
    pub delta_t_ms: f64,
    pub tau_ms: f64,
}

impl Default for RampSection {
    fn default() -> Self {
        let (delta_t_ms, tau_ms) = crate::plant::SUPERFLUID_MOTT_BASE;
        Self { s_max_er: 25.0, delta_t_ms, tau_ms }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyChoice {
    Harmonic,
    Randomized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrabSection {
    pub n_f: usize,
    pub frequencies: FrequencyChoice,
    /// `[a_1, b_1, a_2, b_2, ...]`; empty means all zero.
    pub initial_coefficients: Vec<f64>,
    /// Coefficients are confined to `[-bound, bound]`.
    pub coefficient_bound: f64,
}

impl Default for CrabSection {
    fn default() -> Self {
        Self { n_f: 2, frequencies: FrequencyChoice::Harmonic, initial_coefficients: Vec::new(), coefficient_bound: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExponentialSection {
    pub delta_t_min_ms: f64,
    pub delta_t_max_ms: f64,
    pub tau_min_ms: f64,
    pub tau_max_ms: f64,
}

impl Default for ExponentialSection {
    fn default() -> Self {
        Self { delta_t_min_ms: 2.0, delta_t_max_ms: 200.0, tau_min_ms: 0.5, tau_max_ms: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub max_evals: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    pub restarts: usize,
    /// Initial simplex edge per parameter; empty picks the mode default.
    pub init_scale: Vec<f64>,
    pub reeval_best: bool,
    pub randomize_init: bool,
    /// FOM assigned to infeasible points (plus squared distance outside bounds).
    pub penalty_base: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerOptions::new(Vec::new());
        Self {
            max_evals: o.max_evals,
            f_tol: o.f_tol,
            x_tol: o.x_tol,
            restarts: o.restarts,
            init_scale: Vec::new(),
            reeval_best: o.reeval_best,
            randomize_init: o.randomize_init,
            penalty_base: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub quasi_adiabatic: bool,
    /// The uncorrected base ramp (CRAB) or the initial guess (two-parameter).
    pub initial_guess: bool,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        Self { quasi_adiabatic: true, initial_guess: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeSection {
    pub delta_t_min_ms: f64,
    pub delta_t_max_ms: f64,
    pub delta_t_count: usize,
    pub tau_min_ms: f64,
    pub tau_max_ms: f64,
    pub tau_count: usize,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self {
            delta_t_min_ms: 5.0,
            delta_t_max_ms: 150.0,
            delta_t_count: 16,
            tau_min_ms: 1.0,
            tau_max_ms: 30.0,
            tau_count: 16,
        }
    }
}

impl LandscapeSection {
    pub fn delta_t_axis(&self) -> Vec<f64> {
        linspace(self.delta_t_min_ms, self.delta_t_max_ms, self.delta_t_count)
    }

    pub fn tau_axis(&self) -> Vec<f64> {
        linspace(self.tau_min_ms, self.tau_max_ms, self.tau_count)
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub master_seed: u64,
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub ramp: RampSection,
    #[serde(default)]
    pub crab: CrabSection,
    #[serde(default)]
    pub exponential: ExponentialSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub references: ReferenceSection,
    #[serde(default)]
    pub landscape: LandscapeSection,
}

impl RunConfig {
    pub fn new(mode: Mode, master_seed: u64) -> Self {
        let mut c = Self {
            mode,
            master_seed,
            plant: PlantSection::default(),
            ramp: RampSection::default(),
            crab: CrabSection::default(),
            exponential: ExponentialSection::default(),
            optimizer: OptimizerSection::default(),
            references: ReferenceSection::default(),
            landscape: LandscapeSection::default(),
        };
        if mode != Mode::CrabSfmi {
            let (dt, tau) = crate::plant::CROSSOVER_GUESS;
            c.ramp = RampSection { s_max_er: 32.0, delta_t_ms: dt, tau_ms: tau };
        }
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ControlError> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` and applies `key=value` overrides; every key must name
    /// an existing (possibly defaulted) entry.
    pub fn with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self, ControlError> {
        let mut parsed: RunConfig = toml::from_str(text).map_err(|e| ControlError::Config(e.to_string()))?;
        let table: toml::Table = toml::from_str(text).map_err(|e| ControlError::Config(e.to_string()))?;
        if !table.contains_key("ramp") {
            parsed.ramp = Self::new(parsed.mode, parsed.master_seed).ramp;
        }
        let mut value = toml::Value::try_from(&parsed).map_err(|e| ControlError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let config: RunConfig = value.try_into().map_err(|e: toml::de::Error| ControlError::Config(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ControlError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Dotted keys accepted by overrides, with their current values.
    pub fn override_keys(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("configs serialize");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("configs serialize");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            Mode::CrabSfmi => 2 * self.crab.n_f,
            Mode::Exponential2param | Mode::LandscapeMap => 2,
        }
    }

    pub fn check(&self) -> Result<(), ControlError> {
        let bad = |m: String| Err(ControlError::Config(m));
        self.plant.hubbard().check()?;
        let p = &self.plant;
        if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) {
            return bad(format!("plant.noise_sigma must be >= 0, got {}", p.noise_sigma));
        }
        if !(p.step_ms > 0.0 && p.step_ms.is_finite()) {
            return bad(format!("plant.step_ms must be positive, got {}", p.step_ms));
        }
        if !(p.hold_ms >= 0.0 && p.hold_ms.is_finite()) {
            return bad(format!("plant.hold_ms must be >= 0, got {}", p.hold_ms));
        }
        ExponentialRamp::new(self.ramp.s_max_er, self.ramp.delta_t_ms, self.ramp.tau_ms)?;
        let o = &self.optimizer;
        if !o.init_scale.is_empty() && o.init_scale.len() != self.dim() {
            return bad(format!("optimizer.init_scale needs {} entries, got {}", self.dim(), o.init_scale.len()));
        }
        match self.mode {
            Mode::CrabSfmi => {
                let c = &self.crab;
                if c.n_f == 0 {
                    return bad("crab.n_f must be at least 1".into());
                }
                if !c.initial_coefficients.is_empty() && c.initial_coefficients.len() != 2 * c.n_f {
                    return bad(format!(
                        "crab.initial_coefficients needs {} entries, got {}",
                        2 * c.n_f,
                        c.initial_coefficients.len()
                    ));
                }
                if !(c.coefficient_bound > 0.0) {
                    return bad("crab.coefficient_bound must be positive".into());
                }
            }
            Mode::Exponential2param => {
                let e = &self.exponential;
                if !(0.0 < e.delta_t_min_ms && e.delta_t_min_ms < e.delta_t_max_ms && 0.0 < e.tau_min_ms && e.tau_min_ms < e.tau_max_ms) {
                    return bad("exponential bounds must be positive and ordered".into());
                }
            }
            Mode::LandscapeMap => {
                let l = &self.landscape;
                for (name, n) in [("delta_t_count", l.delta_t_count), ("tau_count", l.tau_count)] {
                    if !(1..=MAX_GRID).contains(&n) {
                        return bad(format!("landscape.{name} must lie in 1..={MAX_GRID}, got {n}"));
                    }
                }
                if !(l.delta_t_min_ms > 0.0 && l.tau_min_ms > 0.0 && l.delta_t_max_ms >= l.delta_t_min_ms && l.tau_max_ms >= l.tau_min_ms) {
                    return bad("landscape axes must be positive and ordered".into());
                }
            }
        }
        Ok(())
    }

    fn frequencies(&self) -> Vec<f64> {
        let policy = match self.crab.frequencies {
            FrequencyChoice::Harmonic => FrequencyPolicy::Harmonic,
            FrequencyChoice::Randomized => FrequencyPolicy::Randomized { seed: derive_seed(self.master_seed, "frequencies", 0) },
        };
        policy.frequencies(self.crab.n_f, self.ramp.delta_t_ms)
    }

    fn base_ramp(&self) -> ExponentialRamp {
        ExponentialRamp::new(self.ramp.s_max_er, self.ramp.delta_t_ms, self.ramp.tau_ms).expect("checked")
    }

    /// The control field for a parameter vector, `None` if it is infeasible.
    pub fn field(&self, params: &[f64]) -> Option<ControlField> {
        let field = match self.mode {
            Mode::CrabSfmi => {
                let corr = CrabCorrection::from_flat(params, self.frequencies()).ok()?;
                ControlField::corrected(self.base_ramp(), corr)
            }
            Mode::Exponential2param | Mode::LandscapeMap => {
                ControlField::exponential(ExponentialRamp::new(self.ramp.s_max_er, params[0], params[1]).ok()?)
            }
        };
        field.validate().is_valid().then_some(field)
    }

    pub fn initial_params(&self) -> Vec<f64> {
        match self.mode {
            Mode::CrabSfmi if self.crab.initial_coefficients.is_empty() => vec![0.0; 2 * self.crab.n_f],
            Mode::CrabSfmi => self.crab.initial_coefficients.clone(),
            _ => vec![self.ramp.delta_t_ms, self.ramp.tau_ms],
        }
    }

    pub fn bounds(&self) -> Bounds {
        match self.mode {
            Mode::CrabSfmi => {
                let b = self.crab.coefficient_bound;
                Bounds { lower: vec![-b; self.dim()], upper: vec![b; self.dim()] }
            }
            _ => {
                let e = &self.exponential;
                Bounds { lower: vec![e.delta_t_min_ms, e.tau_min_ms], upper: vec![e.delta_t_max_ms, e.tau_max_ms] }
            }
        }
    }

    pub fn optimizer_options(&self) -> OptimizerOptions {
        let o = &self.optimizer;
        let init_scale = if !o.init_scale.is_empty() {
            o.init_scale.clone()
        } else if self.mode == Mode::CrabSfmi {
            vec![0.3; self.dim()]
        } else {
            vec![5.0, 1.0]
        };
        OptimizerOptions {
            max_evals: o.max_evals,
            f_tol: o.f_tol,
            x_tol: o.x_tol,
            restarts: o.restarts,
            init_scale,
            reeval_best: o.reeval_best,
            randomize_init: o.randomize_init,
            rng_seed: derive_seed(self.master_seed, "optimizer", 0),
        }
    }

    /// Labeled reference fields evaluated ahead of the optimization.
    pub fn reference_fields(&self) -> Vec<(String, Vec<f64>, ControlField)> {
        let s_max = self.ramp.s_max_er;
        let exp = |dt: f64, tau: f64| ControlField::exponential(ExponentialRamp::new(s_max, dt, tau).expect("reference ramps are valid"));
        let mut out = Vec::new();
        if self.references.quasi_adiabatic {
            let (dt, tau) = QUASI_ADIABATIC;
            out.push(("quasi_adiabatic".to_string(), vec![dt, tau], exp(dt, tau)));
        }
        if self.references.initial_guess {
            let (dt, tau) = (self.ramp.delta_t_ms, self.ramp.tau_ms);
            let label = if self.mode == Mode::CrabSfmi { "uncorrected" } else { "initial_guess" };
            out.push((label.to_string(), vec![dt, tau], exp(dt, tau)));
        }
        out
    }
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<(), ControlError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*part)
            .filter(|v| v.is_table())
            .ok_or_else(|| ControlError::UnknownKey(key.to_string()))?;
    }
    let last = parts[parts.len() - 1];
    let table = node.as_table_mut().ok_or_else(|| ControlError::UnknownKey(key.to_string()))?;
    let slot = table.get_mut(last).filter(|v| !v.is_table()).ok_or_else(|| ControlError::UnknownKey(key.to_string()))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"));
    let new = match (&*slot, parsed) {
        (toml::Value::String(_), Some(toml::Value::String(s))) => toml::Value::String(s),
        (toml::Value::String(_), _) => toml::Value::String(raw.to_string()),
        (toml::Value::Float(_), Some(toml::Value::Integer(i))) => toml::Value::Float(i as f64),
        (_, Some(v)) => v,
        (_, None) => return Err(ControlError::Config(format!("cannot parse value `{raw}` for `{key}`"))),
    };
    *slot = new;
    Ok(())
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => out.push((prefix.to_string(), v.to_string())),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed for stream `domain`, item `n`: the first eight bytes of
/// `SHA-256(domain || master_seed || n)`.
pub fn derive_seed(master_seed: u64, domain: &str, n: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update(master_seed.to_le_bytes());
    h.update(n.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed of log record `n`.
pub fn evaluation_seed(master_seed: u64, n: usize) -> u64 {
    derive_seed(master_seed, "evaluation", n as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Reference,
    Simplex,
    Restart,
}

impl From<SearchPhase> for Phase {
    fn from(p: SearchPhase) -> Self {
        match p {
            SearchPhase::Simplex => Phase::Simplex,
            SearchPhase::Restart => Phase::Restart,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Outside the parameter bounds; the plant was not run.
    OutOfBounds,
    /// Field failed validation; the plant was not run.
    InvalidField,
    /// The plant reported an error.
    PlantFailed,
}

/// One line of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub params: Vec<f64>,
    pub fom: f64,
    pub fidelity: Option<f64>,
    pub energy_excess: Option<f64>,
    pub seed: u64,
    /// Simulated laboratory clock after this shot: the summed durations of
    /// all ramps and holds so far.
    pub wall_time_ms: f64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub remeasure: bool,
    pub kappa: f64,
    pub config_digest: String,
}

impl IterationRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Plant plus the sampling rules of a run.
pub struct Bench {
    model: LatticeModel,
    plant: PlantSection,
}

/// Outcome of one shot.
pub struct Shot {
    pub sample: FomSample,
    pub duration_ms: f64,
}

impl Bench {
    pub fn new(plant: &PlantSection) -> Result<Self, ControlError> {
        Ok(Self { model: LatticeModel::new(&plant.hubbard())?, plant: plant.clone() })
    }

    pub fn protocol(&self, field: &ControlField, noise_sigma: f64, seed: u64) -> Result<PlantProtocol, ControlError> {
        let dt = field.delta_t();
        let up = sample_waveform(field, self.plant.n_steps(dt))?;
        Ok(if self.plant.round_trip {
            let down = adiabatic_ramp_down(up.last(), self.plant.n_steps(QUASI_ADIABATIC.0))?;
            PlantProtocol::round_trip(up, self.plant.hold_ms, down, noise_sigma, seed)
        } else {
            PlantProtocol::forward(up, noise_sigma, seed)
        })
    }

    pub fn shot(&self, field: &ControlField, seed: u64) -> Result<Shot, ControlError> {
        self.shot_with_noise(field, self.plant.noise_sigma, seed)
    }

    pub fn shot_with_noise(&self, field: &ControlField, noise_sigma: f64, seed: u64) -> Result<Shot, ControlError> {
        let protocol = self.protocol(field, noise_sigma, seed)?;
        let mut duration_ms = protocol.ramp_up.duration();
        if let Some(down) = &protocol.ramp_down {
            duration_ms += protocol.hold_ms + down.duration();
        }
        Ok(Shot { sample: evaluate_with(&self.model, &protocol)?, duration_ms })
    }

    /// Noise-free FOM of `field`.
    pub fn true_fom(&self, field: &ControlField) -> Result<f64, ControlError> {
        Ok(self.shot_with_noise(field, 0.0, 0)?.sample.fom)
    }
}

/// Everything a finished closed-loop run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: OptimumReport,
    pub records: Vec<IterationRecord>,
    pub optimal_field: ControlField,
    pub optimal_waveform: Waveform,
}

impl RunOutcome {
    pub fn references(&self) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Reference)
    }

    pub fn reference(&self, label: &str) -> Option<&IterationRecord> {
        self.references().find(|r| r.label.as_deref() == Some(label))
    }
}

struct Session<'a> {
    config: &'a RunConfig,
    bench: Bench,
    digest: String,
    replay: std::vec::IntoIter<IterationRecord>,
    records: Vec<IterationRecord>,
    log: File,
    log_path: PathBuf,
    clock_ms: f64,
    failure: Option<ControlError>,
}

impl Session<'_> {
    /// Produces record `records.len()`: from the replay queue if one is
    /// pending, otherwise by running the plant and appending to the log.
    fn measure(&mut self, phase: Phase, label: Option<&str>, params: &[f64], remeasure: bool, field: Result<Option<ControlField>, f64>) -> f64 {
        if self.failure.is_some() {
            return f64::NAN;
        }
        let index = self.records.len();
        if let Some(rec) = self.replay.next() {
            let same_params = rec.params.len() == params.len()
                && rec.params.iter().zip(params).all(|(a, b)| a.to_bits() == b.to_bits());
            if rec.index != index || rec.phase != phase || !same_params || rec.label.as_deref() != label {
                self.failure = Some(ControlError::ReplayDiverged {
                    index,
                    message: format!("log has {:?} {:?} at {:?}, run asks {:?} {:?} at {:?}", rec.phase, rec.label, rec.params, phase, label, params),
                });
                return f64::NAN;
            }
            self.clock_ms = rec.wall_time_ms;
            let fom = rec.fom;
            self.records.push(rec);
            return fom;
        }

        let seed = evaluation_seed(self.config.master_seed, index);
        let penalty = self.config.optimizer.penalty_base;
        let (fom, fidelity, energy_excess, status, error) = match field {
            Err(p) => (p, None, None, Status::OutOfBounds, None),
            Ok(None) => (penalty, None, None, Status::InvalidField, None),
            Ok(Some(f)) => match self.bench.shot(&f, seed) {
                Ok(shot) => {
                    self.clock_ms += shot.duration_ms;
                    let s = shot.sample;
                    (s.fom, Some(s.fidelity), Some(s.energy_excess), Status::Ok, None)
                }
                Err(e) => (penalty, None, None, Status::PlantFailed, Some(e.to_string())),
            },
        };
        let rec = IterationRecord {
            index,
            phase,
            label: label.map(str::to_string),
            params: params.to_vec(),
            fom,
            fidelity,
            energy_excess,
            seed,
            wall_time_ms: self.clock_ms,
            status,
            error,
            remeasure,
            kappa: self.config.plant.kappa_hbar_per_er_per_ms,
            config_digest: self.digest.clone(),
        };
        let line = rec.to_line();
        if let Err(e) = writeln!(self.log, "{line}").and_then(|_| self.log.flush()) {
            self.failure = Some(ControlError::Io { path: self.log_path.clone(), source: e });
            return f64::NAN;
        }
        log::debug!("record {index}: fom {fom}");
        self.records.push(rec);
        fom
    }
}

/// Runs the closed loop from scratch, truncating `log_path`.
pub fn run_closed_loop(config: &RunConfig, log_path: &Path) -> Result<RunOutcome, ControlError> {
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(log_path).map_err(io_err(log_path))?;
    drive(config, log_path, Vec::new())
}

/// Continues the run recorded in `log_path`: recorded FOMs are replayed into
/// the optimizer without plant calls, new evaluations are appended. A
/// trailing partial line (from a crash mid-write) is discarded.
pub fn resume(config: &RunConfig, log_path: &Path) -> Result<RunOutcome, ControlError> {
    let prior = read_log(log_path)?;
    let digest = config.digest();
    if let Some(r) = prior.iter().find(|r| r.config_digest != digest) {
        return Err(ControlError::DigestMismatch { expected: digest, found: r.config_digest.clone() });
    }
    // Rewrite exactly the complete records so appends start on a fresh line.
    let mut text = String::new();
    for r in &prior {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(log_path, text).map_err(io_err(log_path))?;
    drive(config, log_path, prior)
}

/// Parses a log, ignoring an unterminated final line.
pub fn read_log(path: &Path) -> Result<Vec<IterationRecord>, ControlError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    let mut out = Vec::new();
    for (i, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: IterationRecord = serde_json::from_str(line).map_err(|e| ControlError::Log {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn drive(config: &RunConfig, log_path: &Path, prior: Vec<IterationRecord>) -> Result<RunOutcome, ControlError> {
    config.check()?;
    if config.mode == Mode::LandscapeMap {
        return Err(ControlError::Config("landscape_map runs through map_landscape".into()));
    }
    let log = OpenOptions::new().append(true).open(log_path).map_err(io_err(log_path))?;
    let mut session = Session {
        config,
        bench: Bench::new(&config.plant)?,
        digest: config.digest(),
        replay: prior.into_iter(),
        records: Vec::new(),
        log,
        log_path: log_path.to_path_buf(),
        clock_ms: 0.0,
        failure: None,
    };

    for (label, params, field) in config.reference_fields() {
        session.measure(Phase::Reference, Some(label.as_str()), &params, false, Ok(Some(field)));
    }
    if let Some(e) = session.failure.take() {
        return Err(e);
    }

    let bounds = config.bounds();
    let penalty = config.optimizer.penalty_base;
    let objective = |x: &[f64], ctx: EvalContext| {
        let field = match bounds.penalty(x, penalty) {
            Some(p) => Err(p),
            None => Ok(config.field(x)),
        };
        session.measure(ctx.phase.into(), None, x, ctx.remeasure, field)
    };
    let report = minimize_with_context(objective, &config.initial_params(), &config.optimizer_options())?;
    if let Some(e) = session.failure.take() {
        return Err(e);
    }
    if let Some(extra) = session.replay.next() {
        return Err(ControlError::ReplayDiverged {
            index: extra.index,
            message: "log holds records the run never requested".into(),
        });
    }

    let optimal_field = config
        .field(&report.best_params)
        .ok_or_else(|| ControlError::Config("no feasible point was evaluated".into()))?;
    let optimal_waveform = sample_waveform(&optimal_field, config.plant.n_steps(optimal_field.delta_t()))?;
    Ok(RunOutcome { report, records: session.records, optimal_field, optimal_waveform })
}

/// Summary written next to the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub config_digest: String,
    pub kappa: f64,
    pub best_params: Vec<f64>,
    pub best_fom: f64,
    pub best_record: usize,
    pub evaluations: usize,
    pub restarts_used: usize,
    pub termination: crate::optimizer::Termination,
    pub references: Vec<ReferenceSummary>,
    pub optimal_field: ControlField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub label: String,
    pub params: Vec<f64>,
    pub fom: f64,
}

impl RunOutcome {
    pub fn summary(&self, config: &RunConfig) -> RunReport {
        let n_refs = self.references().count();
        RunReport {
            mode: config.mode,
            config_digest: config.digest(),
            kappa: config.plant.kappa_hbar_per_er_per_ms,
            best_params: self.report.best_params.clone(),
            best_fom: self.report.best_fom,
            best_record: n_refs + self.report.best_index,
            evaluations: self.report.eval_count(),
            restarts_used: self.report.restarts_used,
            termination: self.report.termination,
            references: self
                .references()
                .map(|r| ReferenceSummary { label: r.label.clone().unwrap_or_default(), params: r.params.clone(), fom: r.fom })
                .collect(),
            optimal_field: self.optimal_field.clone(),
        }
    }

    /// Writes the report, the optimal waveform and the FOM trace into `dir`
    /// (the log is already there if the run used `dir/LOG_FILE`).
    pub fn write_outputs(&self, config: &RunConfig, dir: &Path) -> Result<(), ControlError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let report = dir.join(REPORT_FILE);
        let json = serde_json::to_string_pretty(&self.summary(config)).expect("reports serialize");
        fs::write(&report, json + "\n").map_err(io_err(&report))?;
        let wave = dir.join(WAVEFORM_FILE);
        fs::write(&wave, self.optimal_waveform.to_csv_string()).map_err(io_err(&wave))?;
        let trace = dir.join(TRACE_FILE);
        fs::write(&trace, fom_trace_csv(&self.records)).map_err(io_err(&trace))?;
        Ok(())
    }
}

/// `index,phase,label,fom,best_so_far` per record; references do not
/// enter the running best.
pub fn fom_trace_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from("index,phase,label,fom,best_so_far\n");
    let mut best = f64::INFINITY;
    for r in records {
        let best_col = if r.phase == Phase::Reference {
            String::new()
        } else {
            best = best.min(r.fom);
            format!("{best:.16e}")
        };
        let phase = serde_json::to_value(r.phase).expect("phases serialize");
        out.push_str(&format!(
            "{},{},{},{:.16e},{}\n",
            r.index,
            phase.as_str().unwrap_or_default(),
            r.label.as_deref().unwrap_or(""),
            r.fom,
            best_col
        ));
    }
    out
}

/// Brute-force map over `(delta_t, tau)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub delta_t_ms: Vec<f64>,
    pub tau_ms: Vec<f64>,
    /// `fom[i][j]` at `(delta_t_ms[i], tau_ms[j])`; `None` marks a failed cell.
    pub fom: Vec<Vec<Option<f64>>>,
    pub seeds: Vec<Vec<u64>>,
    /// `(i, j, reason)` for every failed cell.
    pub failures: Vec<(usize, usize, String)>,
}

impl LandscapeGrid {
    /// Lowest cell as `(i, j, fom)`.
    pub fn minimum(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in self.fom.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    if best.map_or(true, |b| v < b.2) {
                        best = Some((i, j, v));
                    }
                }
            }
        }
        best
    }

    /// Rows follow `delta_t`, columns `tau`; failed cells print as `nan`.
    pub fn matrix_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.fom {
            let cells: Vec<String> = row.iter().map(|v| v.map_or("nan".to_string(), |v| format!("{v:.16e}"))).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), ControlError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let axis = |name: &str, v: &[f64]| {
            let mut s = format!("{name}\n");
            for x in v {
                s.push_str(&format!("{x:.16e}\n"));
            }
            s
        };
        for (file, text) in [
            (LANDSCAPE_FILE, self.matrix_csv()),
            (LANDSCAPE_DT_FILE, axis("delta_t_ms", &self.delta_t_ms)),
            (LANDSCAPE_TAU_FILE, axis("tau_ms", &self.tau_ms)),
        ] {
            let path = dir.join(file);
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Evaluates the exponential family on the configured grid. Cells run in
/// parallel; results come back in grid order.
pub fn map_landscape(config: &RunConfig) -> Result<LandscapeGrid, ControlError> {
    config.check()?;
    let l = &config.landscape;
    if l.delta_t_count > MAX_GRID || l.tau_count > MAX_GRID {
        return Err(ControlError::Config(format!("grid exceeds {MAX_GRID}x{MAX_GRID}")));
    }
    let bench = Bench::new(&config.plant)?;
    let (dts, taus) = (l.delta_t_axis(), l.tau_axis());
    let cells: Vec<(usize, usize)> = (0..dts.len()).flat_map(|i| (0..taus.len()).map(move |j| (i, j))).collect();
    let results: Vec<(u64, Result<f64, String>)> = cells
        .par_iter()
        .map(|&(i, j)| {
            let seed = derive_seed(config.master_seed, "landscape", (i * taus.len() + j) as u64);
            let out = ExponentialRamp::new(config.ramp.s_max_er, dts[i], taus[j])
                .map_err(ControlError::from)
                .and_then(|ramp| bench.shot(&ControlField::exponential(ramp), seed))
                .map(|s| s.sample.fom)
                .map_err(|e| e.to_string());
            (seed, out)
        })
        .collect();
    let mut fom = vec![vec![None; taus.len()]; dts.len()];
    let mut seeds = vec![vec![0; taus.len()]; dts.len()];
    let mut failures = Vec::new();
    for (&(i, j), (seed, r)) in cells.iter().zip(results) {
        seeds[i][j] = seed;
        match r {
            Ok(v) => fom[i][j] = Some(v),
            Err(e) => failures.push((i, j, e)),
        }
    }
    Ok(LandscapeGrid { delta_t_ms: dts, tau_ms: taus, fom, seeds, failures })
}

/// Merged plot-ready CSV of a log (header only for an empty log).
pub fn export_log_csv(records: &[IterationRecord]) -> String {
    let width = records.iter().map(|r| r.params.len()).max().unwrap_or(0);
    let mut out = String::from("index,phase,label,status,seed,wall_time_ms,fom,fidelity,energy_excess");
    for k in 0..width {
        out.push_str(&format!(",p{k}"));
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.16e}"));
    for r in records {
        let phase = serde_json::to_value(r.phase).expect("phases serialize");
        let status = serde_json::to_value(r.status).expect("statuses serialize");
        out.push_str(&format!(
            "{},{},{},{},{},{:.16e},{:.16e},{},{}",
            r.index,
            phase.as_str().unwrap_or_default(),
            r.label.as_deref().unwrap_or(""),
            status.as_str().unwrap_or_default(),
            r.seed,
            r.wall_time_ms,
            r.fom,
            opt(r.fidelity),
            opt(r.energy_excess)
        ));
        for k in 0..width {
            out.push(',');
            if let Some(p) = r.params.get(k) {
                out.push_str(&format!("{p:.16e}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Reads a log file for export; a missing trailing newline is tolerated.
pub fn read_log_lenient(path: &Path) -> Result<Vec<IterationRecord>, ControlError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ControlError::Log {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
