//! Time-of-flight analysis: synthetic bimodal column-density profiles, the
//! double-structure fit, and the thermal-fraction figure of merit.
//!
//! The condensate is an integrated Thomas-Fermi profile
//! `n_c0 max(0, 1 - u^2)^2` with `u = (x - x0) / R`, the thermal cloud a
//! Gaussian `n_t0 exp(-(x - x0)^2 / (2 sigma_t^2))`.

use std::f64::consts::PI;
use std::io::{self, BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::{minimize, OptimizerOptions};

/// Minimum number of grid points accepted by [`bimodal_fit`].
pub const MIN_POINTS: usize = 64;
/// The thermal width must exceed `R / IDENTIFIABILITY_RATIO`.
pub const IDENTIFIABILITY_RATIO: f64 = 4.0;
/// Relative RMS change that counts as a stalled (converged) fit round.
pub const RMS_REL_TOL: f64 = 1e-8;
/// A component carrying less than this share of the atoms is flagged negligible.
pub const NEGLIGIBLE_SHARE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TofError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("non-identifiable fit: {0}")]
    NonIdentifiable(String),
    #[error("initial thermal fraction must be positive, got {0}")]
    ZeroInitialFraction(f64),
    #[error("thermal fraction {0} outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error("profile CSV: {0}")]
    Csv(String),
}

/// Densities on a uniform, strictly increasing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub x: Vec<f64>,
    pub n: Vec<f64>,
    /// Additive-noise scale used at synthesis, 0 for measured data.
    pub noise_sigma: f64,
}

impl DensityProfile {
    pub fn new(x: Vec<f64>, n: Vec<f64>, noise_sigma: f64) -> Result<Self, TofError> {
        let p = Self { x, n, noise_sigma };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<(), TofError> {
        if self.x.len() != self.n.len() {
            return Err(TofError::InvalidProfile("x and n differ in length".into()));
        }
        if self.x.len() < 2 {
            return Err(TofError::InvalidProfile("fewer than two points".into()));
        }
        if self.x.iter().chain(&self.n).any(|v| !v.is_finite()) {
            return Err(TofError::InvalidProfile("non-finite entry".into()));
        }
        let step = self.x[1] - self.x[0];
        if !(step > 0.0) {
            return Err(TofError::InvalidProfile("grid not strictly increasing".into()));
        }
        let span = self.x[self.x.len() - 1] - self.x[0];
        for w in self.x.windows(2) {
            if ((w[1] - w[0]) - step).abs() > 1e-9 * span {
                return Err(TofError::InvalidProfile("grid not uniform".into()));
            }
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        (self.x[self.x.len() - 1] - self.x[0]) / (self.x.len() - 1) as f64
    }

    pub fn span(&self) -> f64 {
        self.x[self.x.len() - 1] - self.x[0]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,n")?;
        for (x, n) in self.x.iter().zip(&self.n) {
            writeln!(w, "{x:.16e},{n:.16e}")?;
        }
        Ok(())
    }

    /// Reads `x,n` CSV; the header line is required.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, TofError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| TofError::Csv("empty file".into()))?
            .map_err(|e| TofError::Csv(e.to_string()))?;
        if header.trim() != "x,n" {
            return Err(TofError::Csv(format!("expected header `x,n`, found `{}`", header.trim())));
        }
        let (mut x, mut n) = (Vec::new(), Vec::new());
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| TofError::Csv(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let mut next = || -> Result<f64, TofError> {
                cols.next()
                    .ok_or_else(|| TofError::Csv(format!("line {}: missing column", lineno + 2)))?
                    .trim()
                    .parse()
                    .map_err(|e| TofError::Csv(format!("line {}: {e}", lineno + 2)))
            };
            x.push(next()?);
            n.push(next()?);
        }
        Self::new(x, n, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BimodalModel {
    pub n_c0: f64,
    /// Thomas-Fermi radius.
    pub radius: f64,
    pub n_t0: f64,
    pub sigma_t: f64,
    pub x0: f64,
}

/// `int_{-1}^{1} (1 - u^2)^2 du`.
const TF_INTEGRAL: f64 = 16.0 / 15.0;

impl BimodalModel {
    pub fn condensate(&self, x: f64) -> f64 {
        tf_shape((x - self.x0) / self.radius) * self.n_c0
    }

    pub fn thermal(&self, x: f64) -> f64 {
        self.n_t0 * gauss_shape((x - self.x0) / self.sigma_t)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.condensate(x) + self.thermal(x)
    }

    pub fn condensate_number(&self) -> f64 {
        self.n_c0 * self.radius * TF_INTEGRAL
    }

    pub fn thermal_number(&self) -> f64 {
        self.n_t0 * self.sigma_t * (2.0 * PI).sqrt()
    }

    pub fn thermal_fraction(&self) -> f64 {
        let (nc, nt) = (self.condensate_number(), self.thermal_number());
        if nc + nt > 0.0 {
            nt / (nc + nt)
        } else {
            0.0
        }
    }

    /// Scales and amplitudes positive (amplitudes may be 0), all finite.
    pub fn check(&self) -> Result<(), TofError> {
        let all = [self.n_c0, self.radius, self.n_t0, self.sigma_t, self.x0];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(TofError::InvalidModel("non-finite parameter".into()));
        }
        if self.n_c0 < 0.0 || self.n_t0 < 0.0 || self.radius <= 0.0 || self.sigma_t <= 0.0 {
            return Err(TofError::InvalidModel("amplitudes must be >= 0 and widths > 0".into()));
        }
        Ok(())
    }
}

fn tf_shape(u: f64) -> f64 {
    let p = 1.0 - u * u;
    if p > 0.0 {
        p * p
    } else {
        0.0
    }
}

fn gauss_shape(u: f64) -> f64 {
    (-0.5 * u * u).exp()
}

/// Evaluates `model` on `grid` and adds seeded Gaussian noise, clamping at 0.
pub fn synth_profile(model: &BimodalModel, grid: &[f64], noise_sigma: f64, rng_seed: u64) -> Result<DensityProfile, TofError> {
    model.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = (noise_sigma > 0.0)
        .then(|| Normal::new(0.0, noise_sigma).map_err(|e| TofError::InvalidModel(e.to_string())))
        .transpose()?;
    let n = grid
        .iter()
        .map(|&x| {
            let clean = model.eval(x);
            match &noise {
                Some(d) => (clean + d.sample(&mut rng)).max(0.0),
                None => clean,
            }
        })
        .collect();
    DensityProfile::new(grid.to_vec(), n, noise_sigma)
}

/// `n` points evenly covering `[start, end]`.
pub fn uniform_grid(start: f64, end: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { end } else { start + (end - start) * i as f64 / (n - 1) as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: BimodalModel,
    /// Condensed atom number, integral of the condensate term.
    pub n_condensed: f64,
    /// Thermal atom number, integral of the Gaussian term.
    pub n_thermal: f64,
    pub thermal_fraction: f64,
    pub residual_rms: f64,
    pub converged: bool,
    /// The condensate carries less than [`NEGLIGIBLE_SHARE`] of the atoms.
    pub condensate_negligible: bool,
    /// The thermal cloud carries less than [`NEGLIGIBLE_SHARE`] of the atoms.
    pub thermal_negligible: bool,
}

impl FitResult {
    /// One-line JSON record, the same encoding as the iteration log.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("fit results serialize")
    }
}

/// Profile in normalized coordinates `(x - c) / w`, `n / peak`.
struct Normalized {
    u: Vec<f64>,
    y: Vec<f64>,
    /// Noise scale in units of the peak, 0 when unknown.
    sigma: f64,
    center: f64,
    width: f64,
    peak: f64,
}

/// Model parameters in normalized units: center, radius, thermal width and
/// the two amplitudes.
#[derive(Debug, Clone, Copy)]
struct Params {
    mu: f64,
    r: f64,
    s: f64,
    a: f64,
    b: f64,
}

impl Normalized {
    fn new(p: &DensityProfile) -> Result<Self, TofError> {
        let peak = p.n.iter().cloned().fold(0.0, f64::max);
        if !(peak > 0.0) {
            return Err(TofError::InvalidProfile("profile has no positive density".into()));
        }
        // Center and size from the region above half maximum.
        let (mut mass, mut first, mut lo, mut hi) = (0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for (&x, &n) in p.x.iter().zip(&p.n) {
            if n >= 0.5 * peak {
                mass += n;
                first += n * x;
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        let center = first / mass;
        let width = (0.5 * (hi - lo)).max(p.spacing());
        Ok(Self {
            u: p.x.iter().map(|x| (x - center) / width).collect(),
            y: p.n.iter().map(|n| n / peak).collect(),
            sigma: p.noise_sigma.max(0.0) / peak,
            center,
            width,
            peak,
        })
    }

    /// Best nonnegative amplitudes and the sum of squared residuals for
    /// center `mu`, radius `r` and thermal width `s`, ignoring clamping.
    fn profile_amplitudes(&self, mu: f64, r: f64, s: f64) -> (f64, f64, f64) {
        let (mut acc, mut agg, mut acg, mut ayc, mut ayg, mut ayy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (&u, &y) in self.u.iter().zip(&self.y) {
            let c = tf_shape((u - mu) / r);
            let g = gauss_shape((u - mu) / s);
            acc += c * c;
            agg += g * g;
            acg += c * g;
            ayc += y * c;
            ayg += y * g;
            ayy += y * y;
        }
        let sse = |a: f64, b: f64| {
            (ayy - 2.0 * a * ayc - 2.0 * b * ayg + a * a * acc + 2.0 * a * b * acg + b * b * agg).max(0.0)
        };
        let det = acc * agg - acg * acg;
        if det > 1e-14 * acc * agg {
            let a = (ayc * agg - ayg * acg) / det;
            let b = (ayg * acc - ayc * acg) / det;
            if a >= 0.0 && b >= 0.0 {
                return (a, b, sse(a, b));
            }
        }
        // Active set: one component pinned at zero.
        let only_c = if acc > 0.0 { (ayc / acc).max(0.0) } else { 0.0 };
        let only_g = if agg > 0.0 { (ayg / agg).max(0.0) } else { 0.0 };
        let (sc, sg) = (sse(only_c, 0.0), sse(0.0, only_g));
        if sc < sg {
            (only_c, 0.0, sc)
        } else {
            (0.0, only_g, sg)
        }
    }

    /// Expected measured value for model value `m`: with additive noise
    /// clamped at zero this is `E[max(0, m + e)]`.
    fn observed(&self, m: f64) -> (f64, f64) {
        if self.sigma == 0.0 {
            return (m, 1.0);
        }
        let z = m / self.sigma;
        let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
        let pdf = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
        (m * cdf + self.sigma * pdf, cdf)
    }

    fn sse(&self, p: &Params) -> f64 {
        self.u
            .iter()
            .zip(&self.y)
            .map(|(&u, &y)| {
                let m = p.a * tf_shape((u - p.mu) / p.r) + p.b * gauss_shape((u - p.mu) / p.s);
                (y - self.observed(m).0).powi(2)
            })
            .sum()
    }

    /// Simplex search over center and log-widths from several starts, with
    /// the amplitudes solved linearly at every trial.
    fn global_search(&self) -> Params {
        let objective = |p: &[f64]| self.profile_amplitudes(p[0], p[1].exp(), p[2].exp()).2;
        // (radius, thermal width) in units of the half width at half maximum.
        let starts = [(1.85, 4.0), (1.85, 2.0), (1.85, 8.0), (1.0, 3.0), (3.0, 6.0), (3.0, 0.8), (1.2, 0.6)];
        let mut best: Option<(Vec<f64>, f64)> = None;
        for (i, &(r, s)) in starts.iter().enumerate() {
            let opts = OptimizerOptions {
                max_evals: 1500,
                f_tol: 1e-30,
                x_tol: 1e-10,
                restarts: 2,
                init_scale: vec![0.1; 3],
                reeval_best: false,
                randomize_init: false,
                rng_seed: i as u64,
            };
            let x0 = [0.0, f64::ln(r), f64::ln(s)];
            let rep = minimize(objective, &x0, &opts).expect("fit options are valid");
            if best.as_ref().map_or(true, |b| rep.best_fom < b.1) {
                best = Some((rep.best_params, rep.best_fom));
            }
        }
        let p = best.expect("at least one start").0;
        let (mu, r, s) = (p[0], p[1].exp(), p[2].exp());
        let (a, b, _) = self.profile_amplitudes(mu, r, s);
        Params { mu, r, s, a, b }
    }

    /// Levenberg-Marquardt on the full residual. Amplitudes pinned at zero
    /// stay there together with their width. Returns the refined parameters
    /// and whether the RMS change stalled below [`RMS_REL_TOL`] on two
    /// consecutive iterations.
    fn polish(&self, start: Params) -> (Params, bool) {
        let free = [true, start.a > 0.0, start.b > 0.0, start.a > 0.0, start.b > 0.0];
        let idx: Vec<usize> = (0..5).filter(|&k| free[k]).collect();
        let k = idx.len();
        let pack = |p: &Params| [p.mu, p.r, p.s, p.a, p.b];
        let unpack = |v: [f64; 5]| Params { mu: v[0], r: v[1], s: v[2], a: v[3], b: v[4] };

        let mut p = start;
        let mut sse = self.sse(&p);
        let rms_of = |sse: f64| (sse / self.y.len() as f64).sqrt();
        let mut lambda = 1e-3;
        let mut stalled = 0;
        for _ in 0..200 {
            let mut jtj = nalgebra::DMatrix::<f64>::zeros(k, k);
            let mut jtr = nalgebra::DVector::<f64>::zeros(k);
            for (&u, &y) in self.u.iter().zip(&self.y) {
                let (v, w) = ((u - p.mu) / p.r, (u - p.mu) / p.s);
                let c = tf_shape(v);
                let dc = if v.abs() < 1.0 { -4.0 * v * (1.0 - v * v) } else { 0.0 };
                let g = gauss_shape(w);
                let m = p.a * c + p.b * g;
                let (e, slope) = self.observed(m);
                let full = [
                    -p.a * dc / p.r + p.b * w * g / p.s,
                    -p.a * dc * v / p.r,
                    p.b * w * w * g / p.s,
                    c,
                    g,
                ];
                let row: Vec<f64> = idx.iter().map(|&q| full[q] * slope).collect();
                let res = y - e;
                for i in 0..k {
                    jtr[i] += row[i] * res;
                    for j in 0..k {
                        jtj[(i, j)] += row[i] * row[j];
                    }
                }
            }
            let mut improved = false;
            for _ in 0..30 {
                let mut lhs = jtj.clone();
                for i in 0..k {
                    lhs[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
                }
                let Some(step) = lhs.lu().solve(&jtr) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut v = pack(&p);
                for (i, &q) in idx.iter().enumerate() {
                    v[q] += step[i];
                }
                let trial = unpack(v);
                let valid = trial.r > 0.0 && trial.s > 0.0 && trial.a >= 0.0 && trial.b >= 0.0;
                let trial_sse = if valid { self.sse(&trial) } else { f64::INFINITY };
                if trial_sse <= sse {
                    let change = (rms_of(sse) - rms_of(trial_sse)) / rms_of(sse).max(1e-300);
                    p = trial;
                    sse = trial_sse;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = true;
                    stalled = if change < RMS_REL_TOL { stalled + 1 } else { 0 };
                    break;
                }
                lambda *= 10.0;
            }
            if !improved || stalled >= 2 {
                // No downhill step left: the minimum is resolved to rounding.
                return (p, true);
            }
        }
        (p, stalled >= 2)
    }
}

/// Least-squares fit of the bimodal model.
///
/// A simplex search over the center and the two widths (amplitudes solved
/// linearly at each trial, nonnegative) finds the basin; Levenberg-Marquardt
/// then resolves the minimum. When the profile carries a known noise scale,
/// the residual is taken against the mean of zero-clamped noisy data.
pub fn bimodal_fit(profile: &DensityProfile) -> Result<FitResult, TofError> {
    profile.check()?;
    if profile.x.len() < MIN_POINTS {
        return Err(TofError::InvalidProfile(format!(
            "need at least {MIN_POINTS} points, got {}",
            profile.x.len()
        )));
    }
    let norm = Normalized::new(profile)?;
    let (p, converged) = norm.polish(norm.global_search());

    let model = BimodalModel {
        n_c0: p.a * norm.peak,
        radius: p.r * norm.width,
        n_t0: p.b * norm.peak,
        sigma_t: p.s * norm.width,
        x0: norm.center + p.mu * norm.width,
    };
    let n_condensed = model.condensate_number();
    let n_thermal = model.thermal_number();
    let total = n_condensed + n_thermal;
    if !(total > 0.0) {
        return Err(TofError::NonIdentifiable("both components vanished".into()));
    }
    let condensate_negligible = n_condensed < NEGLIGIBLE_SHARE * total;
    let thermal_negligible = n_thermal < NEGLIGIBLE_SHARE * total;
    let dx = profile.spacing();
    if !condensate_negligible && model.radius < dx {
        return Err(TofError::NonIdentifiable(format!("condensate width collapsed to {}", model.radius)));
    }
    if !thermal_negligible && model.sigma_t < dx {
        return Err(TofError::NonIdentifiable(format!("thermal width collapsed to {}", model.sigma_t)));
    }
    if !condensate_negligible
        && !thermal_negligible
        && model.sigma_t <= model.radius / IDENTIFIABILITY_RATIO
    {
        return Err(TofError::NonIdentifiable(format!(
            "thermal width {} not above R/{IDENTIFIABILITY_RATIO} = {}",
            model.sigma_t,
            model.radius / IDENTIFIABILITY_RATIO
        )));
    }
    let residual_rms = (profile
        .x
        .iter()
        .zip(&profile.n)
        .map(|(x, n)| (n - model.eval(*x)).powi(2))
        .sum::<f64>()
        / profile.x.len() as f64)
        .sqrt();
    Ok(FitResult {
        model,
        n_condensed,
        n_thermal,
        thermal_fraction: n_thermal / total,
        residual_rms,
        converged,
        condensate_negligible,
        thermal_negligible,
    })
}

/// `F = TF / TF_i`.
pub fn fom_from_thermal_fractions(tf_final: f64, tf_initial: f64) -> Result<f64, TofError> {
    for tf in [tf_final, tf_initial] {
        if !(0.0..=1.0).contains(&tf) {
            return Err(TofError::FractionOutOfRange(tf));
        }
    }
    if tf_initial == 0.0 {
        return Err(TofError::ZeroInitialFraction(tf_initial));
    }
    Ok(tf_final / tf_initial)
}
