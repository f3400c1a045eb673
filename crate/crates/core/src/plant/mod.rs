//! The simulated experiment: a small one-dimensional Bose-Hubbard chain
//! driven by a lattice-depth waveform.
//!
//! Depth `s` (recoil units) is mapped to hopping `J` and interaction `U`;
//! the state is propagated exactly through a piecewise-constant Hamiltonian,
//! and the figure of merit is the infidelity with respect to a target
//! ground state. Control time is converted to `hbar / E_r` by the
//! configurable factor [`HubbardConfig::time_scale`].

mod basis;
mod model;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use basis::{hilbert_dimension, FockBasis, ParitySectors};
pub use model::{GroundState, LatticeModel, QuantumState, DEGENERACY_GAP, NORM_TOLERANCE};

use crate::waveform::{ControlField, ExponentialRamp, FieldError, Waveform};

/// Largest Hilbert-space dimension the plant accepts.
pub const MAX_DIMENSION: usize = 5000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("depth {s} below the mapping floor {s_min}")]
    Shallow { s: f64, s_min: f64 },
    #[error("Hilbert dimension {dim} exceeds the cap {MAX_DIMENSION}")]
    DimensionOverflow { dim: usize },
    #[error("invalid plant configuration: {0}")]
    InvalidConfig(String),
    #[error("norm drifted to {norm}")]
    NormDrift { norm: f64 },
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Open,
    Periodic,
}

/// Depth to Hubbard-parameter mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthMapping {
    /// `J/E_r = (4/sqrt(pi)) s^{3/4} e^{-2 sqrt(s)}`, `U/E_r = u_scale s^{3/4}`,
    /// valid for `s >= s_min`.
    TightBinding { u_scale: f64, s_min: f64 },
}

impl Default for DepthMapping {
    fn default() -> Self {
        DepthMapping::TightBinding { u_scale: 0.2, s_min: 2.0 }
    }
}

impl DepthMapping {
    pub fn s_min(&self) -> f64 {
        match *self {
            DepthMapping::TightBinding { s_min, .. } => s_min,
        }
    }

    /// `(J/E_r, U/E_r)` at depth `s`.
    pub fn hubbard(&self, s: f64) -> Result<(f64, f64), PlantError> {
        let s_min = self.s_min();
        if !(s >= s_min) {
            return Err(PlantError::Shallow { s, s_min });
        }
        Ok(self.formula(s))
    }

    /// Like [`hubbard`](Self::hubbard) but with `s` raised to the floor first.
    pub fn hubbard_clamped(&self, s: f64) -> (f64, f64) {
        self.formula(s.max(self.s_min()))
    }

    fn formula(&self, s: f64) -> (f64, f64) {
        match *self {
            DepthMapping::TightBinding { u_scale, .. } => {
                let s34 = s.powf(0.75);
                let j = 4.0 / std::f64::consts::PI.sqrt() * s34 * (-2.0 * s.sqrt()).exp();
                (j, u_scale * s34)
            }
        }
    }
}

/// Free-standing form of [`DepthMapping::hubbard`] with the default mapping.
pub fn depth_to_hubbard(s: f64) -> Result<(f64, f64), PlantError> {
    DepthMapping::default().hubbard(s)
}

/// Laboratory context for unit bookkeeping; not used by the dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoilContext {
    pub wavelength_nm: f64,
    pub atom: String,
    pub mass_amu: f64,
}

impl Default for RecoilContext {
    fn default() -> Self {
        Self { wavelength_nm: 830.0, atom: "Rb87".into(), mass_amu: 86.909_180_5 }
    }
}

impl RecoilContext {
    const PLANCK: f64 = 6.626_070_15e-34;
    const AMU: f64 = 1.660_539_066_60e-27;

    /// `E_r = h^2 / (2 m lambda^2)` in joules.
    pub fn recoil_energy_joule(&self) -> f64 {
        let lambda = self.wavelength_nm * 1e-9;
        Self::PLANCK.powi(2) / (2.0 * self.mass_amu * Self::AMU * lambda.powi(2))
    }

    /// `E_r / h` in hertz.
    pub fn recoil_frequency_hz(&self) -> f64 {
        self.recoil_energy_joule() / Self::PLANCK
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubbardConfig {
    pub sites: usize,
    pub bosons: usize,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default)]
    pub mapping: DepthMapping,
    /// kappa: one control-time millisecond equals `kappa * hbar / E_r`.
    pub time_scale: f64,
    #[serde(default)]
    pub recoil: RecoilContext,
}

/// Default control-time conversion, see [`HubbardConfig::time_scale`].
pub const DEFAULT_TIME_SCALE: f64 = 1.0;

impl Default for HubbardConfig {
    fn default() -> Self {
        Self {
            sites: 5,
            bosons: 5,
            boundary: Boundary::Open,
            mapping: DepthMapping::default(),
            time_scale: DEFAULT_TIME_SCALE,
            recoil: RecoilContext::default(),
        }
    }
}

impl HubbardConfig {
    pub fn new(sites: usize, bosons: usize) -> Self {
        Self { sites, bosons, ..Self::default() }
    }

    pub fn dimension(&self) -> usize {
        hilbert_dimension(self.sites, self.bosons)
    }

    pub fn check(&self) -> Result<(), PlantError> {
        if !(1..=8).contains(&self.sites) || !(1..=8).contains(&self.bosons) {
            return Err(PlantError::InvalidConfig(format!(
                "sites and bosons must lie in 1..=8, got L={} N={}",
                self.sites, self.bosons
            )));
        }
        let dim = self.dimension();
        if dim > MAX_DIMENSION {
            return Err(PlantError::DimensionOverflow { dim });
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return Err(PlantError::InvalidConfig(format!("time_scale must be positive, got {}", self.time_scale)));
        }
        match self.mapping {
            DepthMapping::TightBinding { u_scale, s_min } => {
                if !(u_scale > 0.0 && u_scale.is_finite() && s_min > 0.0 && s_min.is_finite()) {
                    return Err(PlantError::InvalidConfig("mapping constants must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Free-standing Hamiltonian builder for a single `(J, U)`.
pub fn build_hamiltonian(config: &HubbardConfig, j: f64, u: f64) -> Result<nalgebra::DMatrix<f64>, PlantError> {
    Ok(LatticeModel::new(config)?.hamiltonian(j, u))
}

/// One shot of the simulated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantProtocol {
    pub ramp_up: Waveform,
    /// Time spent at the final depth before ramping down.
    pub hold_ms: f64,
    pub round_trip: bool,
    pub ramp_down: Option<Waveform>,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

/// Hold time at full depth in the round-trip protocol.
pub const DEFAULT_HOLD_MS: f64 = 5.0;

impl PlantProtocol {
    /// Ramp up and compare against the ground state at the final depth.
    pub fn forward(ramp_up: Waveform, noise_sigma: f64, rng_seed: u64) -> Self {
        Self { ramp_up, hold_ms: DEFAULT_HOLD_MS, round_trip: false, ramp_down: None, noise_sigma, rng_seed }
    }

    /// Ramp up, hold, ramp down, and compare against the initial state.
    pub fn round_trip(ramp_up: Waveform, hold_ms: f64, ramp_down: Waveform, noise_sigma: f64, rng_seed: u64) -> Self {
        Self { ramp_up, hold_ms, round_trip: true, ramp_down: Some(ramp_down), noise_sigma, rng_seed }
    }

    fn check(&self) -> Result<(), PlantError> {
        let mut waves = vec![&self.ramp_up];
        if self.round_trip {
            match &self.ramp_down {
                Some(w) => waves.push(w),
                None => return Err(PlantError::InvalidProtocol("round trip needs a ramp-down".into())),
            }
        }
        for w in waves {
            if w.samples.len() < 2 || w.samples.iter().any(|s| !s.is_finite()) {
                return Err(PlantError::InvalidProtocol("malformed waveform".into()));
            }
            if let Some(s) = w.samples.iter().find(|&&s| s < 0.0) {
                return Err(PlantError::InvalidProtocol(format!("negative depth {s}")));
            }
        }
        if !(self.hold_ms >= 0.0 && self.hold_ms.is_finite()) {
            return Err(PlantError::InvalidProtocol(format!("hold_ms must be >= 0, got {}", self.hold_ms)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PlantError::InvalidProtocol("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Result of one plant evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FomSample {
    pub fom: f64,
    pub fidelity: f64,
    /// `<H> - E_0` of the target Hamiltonian, in units of its `J`.
    pub energy_excess: f64,
    pub seed: u64,
    pub noisy: bool,
}

/// Runs `protocol` on a freshly built model.
pub fn evaluate(protocol: &PlantProtocol, config: &HubbardConfig) -> Result<FomSample, PlantError> {
    evaluate_with(&LatticeModel::new(config)?, protocol)
}

/// Runs `protocol` on a prebuilt model.
pub fn evaluate_with(model: &LatticeModel, protocol: &PlantProtocol) -> Result<FomSample, PlantError> {
    protocol.check()?;
    let mapping = model.config().mapping;
    let s_start = protocol.ramp_up.first();
    let s_end = protocol.ramp_up.last();
    let initial = model.ground_state_at_depth(s_start);
    let ramped = model.evolve(&initial.state, &protocol.ramp_up)?;

    let (fidelity, energy_excess) = if protocol.round_trip {
        let held = model.hold(&ramped, s_end, protocol.hold_ms)?;
        let down = protocol.ramp_down.as_ref().expect("checked above");
        let back = model.evolve(&held, down)?;
        let (j, _) = mapping.hubbard_clamped(s_start);
        let h = model.hamiltonian_at_depth(s_start);
        (initial.state.overlap(&back), (back.expectation(&h) - initial.energy) / j)
    } else {
        let target = model.ground_state_at_depth(s_end);
        let (j, _) = mapping.hubbard_clamped(s_end);
        let h = model.hamiltonian_at_depth(s_end);
        (target.state.overlap(&ramped), (ramped.expectation(&h) - target.energy) / j)
    };
    let fidelity = fidelity.clamp(0.0, 1.0);
    let clean = 1.0 - fidelity;
    let (fom, noisy) = if protocol.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(protocol.rng_seed);
        let normal = Normal::new(0.0, protocol.noise_sigma).expect("sigma checked positive");
        ((clean + normal.sample(&mut rng)).max(0.0), true)
    } else {
        (clean, false)
    };
    Ok(FomSample { fom, fidelity, energy_excess, seed: protocol.rng_seed, noisy })
}

/// The two experiments whose reference ramps are built in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Loading into a 2D lattice (array of tubes), `s_max = 32`.
    Crossover3d1d,
    /// Superfluid to Mott insulator in a 3D lattice, `s_max = 25`.
    SuperfluidMott,
}

impl Experiment {
    pub fn s_max(&self) -> f64 {
        match self {
            Experiment::Crossover3d1d => 32.0,
            Experiment::SuperfluidMott => 25.0,
        }
    }
}

/// Quasi-adiabatic duration and time constant, in control ms.
pub const QUASI_ADIABATIC: (f64, f64) = (140.0, 30.0);
/// Initial exponential guess of the two-parameter crossover optimization.
pub const CROSSOVER_GUESS: (f64, f64) = (15.0, 3.0);
/// Base ramp of the superfluid-Mott CRAB optimization.
pub const SUPERFLUID_MOTT_BASE: (f64, f64) = (40.0, 8.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFields {
    pub quasi_adiabatic: ControlField,
    pub initial_guess: ControlField,
}

pub fn reference_protocols(experiment: Experiment) -> ReferenceFields {
    let s_max = experiment.s_max();
    let ramp = |(dt, tau): (f64, f64)| {
        ControlField::exponential(ExponentialRamp::new(s_max, dt, tau).expect("reference ramps are valid"))
    };
    let guess = match experiment {
        Experiment::Crossover3d1d => CROSSOVER_GUESS,
        Experiment::SuperfluidMott => SUPERFLUID_MOTT_BASE,
    };
    ReferenceFields { quasi_adiabatic: ramp(QUASI_ADIABATIC), initial_guess: ramp(guess) }
}

/// The time-reversed quasi-adiabatic ramp used to turn the lattice off.
pub fn adiabatic_ramp_down(s_max: f64, n_steps: usize) -> Result<Waveform, FieldError> {
    let (dt, tau) = QUASI_ADIABATIC;
    let field = ControlField::exponential(ExponentialRamp::new(s_max, dt, tau)?);
    Ok(crate::waveform::sample_waveform(&field, n_steps)?.reversed())
}
