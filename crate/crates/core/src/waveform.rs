//! Control fields for the lattice depth: the exponential loading ramp, the
//! multiplicative CRAB correction, and their uniform discretization.
//!
//! All depths are in recoil-energy units and all times in milliseconds of
//! control time. Every function here is pure.

use std::f64::consts::TAU;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible magnitude of the correction's normalization denominator.
pub const EPS_DENOM: f64 = 1e-6;

/// Number of points on the probe grid used by [`ControlField::validate`].
pub const PROBE_POINTS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("invalid ramp: {0}")]
    InvalidRamp(String),
    #[error("time {t} ms outside [0, {delta_t}] ms")]
    Domain { t: f64, delta_t: f64 },
    #[error("invalid correction: {0}")]
    InvalidCorrection(String),
    #[error("singular correction: |denominator| = {denominator:e} < {EPS_DENOM:e}")]
    Singular { denominator: f64 },
    #[error("waveform needs at least 2 samples, got {0}")]
    InvalidCount(usize),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
}

/// `s(t) = s_max (1 - e^{t/tau}) / (1 - e^{delta_t/tau})`, rising from 0 to `s_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialRamp {
    pub s_max: f64,
    pub delta_t: f64,
    pub tau: f64,
}

impl ExponentialRamp {
    pub fn new(s_max: f64, delta_t: f64, tau: f64) -> Result<Self, FieldError> {
        let ramp = Self { s_max, delta_t, tau };
        ramp.check()?;
        Ok(ramp)
    }

    fn check(&self) -> Result<(), FieldError> {
        if !(self.s_max.is_finite() && self.delta_t.is_finite() && self.tau.is_finite()) {
            return Err(FieldError::InvalidRamp("non-finite parameter".into()));
        }
        if self.tau == 0.0 {
            return Err(FieldError::InvalidRamp("tau must be nonzero".into()));
        }
        if self.delta_t <= 0.0 {
            return Err(FieldError::InvalidRamp("delta_t must be positive".into()));
        }
        if self.s_max < 0.0 {
            return Err(FieldError::InvalidRamp("s_max must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<f64, FieldError> {
        self.check()?;
        if !(0.0..=self.delta_t).contains(&t) {
            return Err(FieldError::Domain { t, delta_t: self.delta_t });
        }
        Ok(self.s_max * self.shape(t))
    }

    /// Normalized profile in [0, 1]. Both forms give exactly 0 at t = 0 and
    /// exactly 1 at t = delta_t; the second avoids overflow when delta_t/tau is large.
    fn shape(&self, t: f64) -> f64 {
        let x = t / self.tau;
        let x_end = self.delta_t / self.tau;
        if x_end <= 1.0 {
            x.exp_m1() / x_end.exp_m1()
        } else {
            (x - x_end).exp() * (-(-x).exp_m1()) / (-(-x_end).exp_m1())
        }
    }
}

/// How CRAB frequencies are chosen for a given duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrequencyPolicy {
    /// `nu_j = j / delta_t`.
    #[default]
    Harmonic,
    /// `nu_j = j (1 + r_j) / delta_t` with `r_j` uniform in [-0.5, 0.5].
    Randomized { seed: u64 },
}

impl FrequencyPolicy {
    pub fn frequencies(&self, n_f: usize, delta_t: f64) -> Vec<f64> {
        match *self {
            FrequencyPolicy::Harmonic => (1..=n_f).map(|j| j as f64 / delta_t).collect(),
            FrequencyPolicy::Randomized { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (1..=n_f)
                    .map(|j| {
                        let r: f64 = rng.random_range(-0.5..=0.5);
                        j as f64 * (1.0 + r) / delta_t
                    })
                    .collect()
            }
        }
    }
}

/// Multiplicative correction
/// `g(t) = [1 + sum_j (a_j sin 2 pi nu_j t + b_j cos 2 pi nu_j t)] / [same at t = delta_t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrabCorrection {
    /// `(a_j, b_j)` pairs.
    pub coeffs: Vec<(f64, f64)>,
    /// `nu_j` in 1/ms.
    pub freqs: Vec<f64>,
}

impl CrabCorrection {
    pub fn new(coeffs: Vec<(f64, f64)>, freqs: Vec<f64>) -> Result<Self, FieldError> {
        let c = Self { coeffs, freqs };
        c.check_shape()?;
        Ok(c)
    }

    /// Builds a correction from a flat `[a_1, b_1, a_2, b_2, ...]` vector.
    pub fn from_flat(flat: &[f64], freqs: Vec<f64>) -> Result<Self, FieldError> {
        if flat.len() % 2 != 0 {
            return Err(FieldError::InvalidCorrection(format!(
                "flat coefficient vector has odd length {}",
                flat.len()
            )));
        }
        let coeffs = flat.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        Self::new(coeffs, freqs)
    }

    pub fn n_f(&self) -> usize {
        self.coeffs.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.coeffs.iter().flat_map(|&(a, b)| [a, b]).collect()
    }

    fn check_shape(&self) -> Result<(), FieldError> {
        if self.coeffs.is_empty() {
            return Err(FieldError::InvalidCorrection("n_f must be at least 1".into()));
        }
        if self.coeffs.len() != self.freqs.len() {
            return Err(FieldError::InvalidCorrection(format!(
                "{} coefficient pairs but {} frequencies",
                self.coeffs.len(),
                self.freqs.len()
            )));
        }
        let finite = self
            .coeffs
            .iter()
            .all(|&(a, b)| a.is_finite() && b.is_finite())
            && self.freqs.iter().all(|f| f.is_finite());
        if !finite {
            return Err(FieldError::InvalidCorrection("non-finite entry".into()));
        }
        Ok(())
    }

    fn series(&self, t: f64) -> f64 {
        1.0 + self
            .coeffs
            .iter()
            .zip(&self.freqs)
            .map(|(&(a, b), &nu)| {
                let phase = TAU * nu * t;
                a * phase.sin() + b * phase.cos()
            })
            .sum::<f64>()
    }

    /// Normalization denominator, the series evaluated at `delta_t`.
    pub fn denominator(&self, delta_t: f64) -> f64 {
        self.series(delta_t)
    }

    pub fn eval(&self, delta_t: f64, t: f64) -> Result<f64, FieldError> {
        self.check_shape()?;
        if !(0.0..=delta_t).contains(&t) {
            return Err(FieldError::Domain { t, delta_t });
        }
        let denominator = self.denominator(delta_t);
        if denominator.abs() < EPS_DENOM {
            return Err(FieldError::Singular { denominator });
        }
        Ok(self.series(t) / denominator)
    }
}

/// One invariant violated by a [`ControlField`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NonFinite,
    InvalidTau,
    InvalidDuration,
    NegativeSmax,
    MalformedCorrection { reason: String },
    SingularDenominator { denominator: f64 },
    NegativeDepth { t: f64, depth: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_negative_depth(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::NegativeDepth { .. }))
    }
}

/// The depth control `s(t) = s0(t) g(t)`; without a correction it is the bare ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlField {
    pub base: ExponentialRamp,
    pub correction: Option<CrabCorrection>,
}

impl ControlField {
    pub fn exponential(base: ExponentialRamp) -> Self {
        Self { base, correction: None }
    }

    pub fn corrected(base: ExponentialRamp, correction: CrabCorrection) -> Self {
        Self { base, correction: Some(correction) }
    }

    pub fn delta_t(&self) -> f64 {
        self.base.delta_t
    }

    pub fn eval(&self, t: f64) -> Result<f64, FieldError> {
        let s0 = self.base.eval(t)?;
        match &self.correction {
            None => Ok(s0),
            Some(c) => Ok(s0 * c.eval(self.base.delta_t, t)?),
        }
    }

    /// Lists every violated invariant. Negative depths are searched on a
    /// fixed [`PROBE_POINTS`] grid and reported once, at the most negative point.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let b = &self.base;
        let base_finite = b.s_max.is_finite() && b.delta_t.is_finite() && b.tau.is_finite();
        let corr_finite = self.correction.as_ref().map_or(true, |c| {
            c.coeffs.iter().all(|&(a, b)| a.is_finite() && b.is_finite())
                && c.freqs.iter().all(|f| f.is_finite())
        });
        if !(base_finite && corr_finite) {
            violations.push(Violation::NonFinite);
        }
        if b.tau == 0.0 {
            violations.push(Violation::InvalidTau);
        }
        if !(b.delta_t > 0.0) {
            violations.push(Violation::InvalidDuration);
        }
        if b.s_max < 0.0 {
            violations.push(Violation::NegativeSmax);
        }
        if let Some(c) = &self.correction {
            if let Err(FieldError::InvalidCorrection(reason)) = c.check_shape() {
                violations.push(Violation::MalformedCorrection { reason });
            } else if b.delta_t.is_finite() {
                let denominator = c.denominator(b.delta_t);
                if !(denominator.abs() >= EPS_DENOM) {
                    violations.push(Violation::SingularDenominator { denominator });
                }
            }
        }
        if violations.is_empty() {
            let mut worst: Option<(f64, f64)> = None;
            for i in 0..PROBE_POINTS {
                let t = probe_time(b.delta_t, i, PROBE_POINTS);
                if let Ok(depth) = self.eval(t) {
                    if depth < 0.0 && worst.map_or(true, |(_, d)| depth < d) {
                        worst = Some((t, depth));
                    }
                }
            }
            if let Some((t, depth)) = worst {
                violations.push(Violation::NegativeDepth { t, depth });
            }
        }
        ValidationReport { violations }
    }
}

fn probe_time(delta_t: f64, i: usize, n: usize) -> f64 {
    if i + 1 == n {
        delta_t
    } else {
        delta_t * i as f64 / (n - 1) as f64
    }
}

/// Uniformly sampled depths starting at t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub dt: f64,
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn new(dt: f64, samples: Vec<f64>) -> Result<Self, FieldError> {
        if samples.len() < 2 {
            return Err(FieldError::InvalidCount(samples.len()));
        }
        if !(dt.is_finite() && dt >= 0.0) {
            return Err(FieldError::InvalidWaveform(format!("bad sample spacing {dt}")));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(FieldError::InvalidWaveform("non-finite sample".into()));
        }
        Ok(Self { dt, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.dt * (self.samples.len() - 1) as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        self.dt * i as f64
    }

    pub fn first(&self) -> f64 {
        self.samples[0]
    }

    pub fn last(&self) -> f64 {
        self.samples[self.samples.len() - 1]
    }

    /// Same samples played backwards, e.g. a ramp-down from a ramp-up.
    pub fn reversed(&self) -> Self {
        let mut samples = self.samples.clone();
        samples.reverse();
        Self { dt: self.dt, samples }
    }

    /// Writes `t_ms,depth_Er` CSV with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t_ms,depth_Er")?;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(w, "{:.16e},{:.16e}", self.time(i), s)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

/// Samples `field` at `n_steps` uniform points on `[0, delta_t]`, both ends included.
pub fn sample_waveform(field: &ControlField, n_steps: usize) -> Result<Waveform, FieldError> {
    if n_steps < 2 {
        return Err(FieldError::InvalidCount(n_steps));
    }
    let delta_t = field.delta_t();
    let samples = (0..n_steps)
        .map(|i| field.eval(probe_time(delta_t, i, n_steps)))
        .collect::<Result<Vec<_>, _>>()?;
    Waveform::new(delta_t / (n_steps - 1) as f64, samples)
}
