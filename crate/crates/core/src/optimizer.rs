//! Nelder-Mead simplex minimization of noisy objectives, with restart
//! exploration around the incumbent once the simplex has collapsed.
//!
//! Objectives see only parameter slices and return a scalar. Inside the
//! optimizer they are wrapped so that every invocation is counted against
//! `max_evals` and recorded in the history.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reflection coefficient.
pub const ALPHA: f64 = 1.0;
/// Expansion coefficient.
pub const GAMMA: f64 = 2.0;
/// Contraction coefficient (inside and outside).
pub const RHO: f64 = 0.5;
/// Shrink coefficient.
pub const SIGMA: f64 = 0.5;
/// Factor applied to `init_scale` when a restart rebuilds the simplex.
pub const RESTART_SCALE: f64 = 2.0;
/// Consecutive steps that must satisfy both tolerances.
pub const CONVERGENCE_STREAK: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("budget of {max_evals} evaluations is below d + 2 = {needed}")]
    Budget { max_evals: usize, needed: usize },
    #[error("degenerate simplex: {0}")]
    Degenerate(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

/// Closed box, one interval per coordinate. Infinite ends are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, OptimizerError> {
        if lower.len() != upper.len() {
            return Err(OptimizerError::InvalidOptions("bounds of unequal length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(OptimizerError::InvalidOptions("lower bound above upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(dim: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; dim], upper: vec![f64::INFINITY; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    /// Squared Euclidean distance from `x` to the box.
    pub fn distance_sq(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| {
                let d = if v < l {
                    l - v
                } else if v > u {
                    v - u
                } else {
                    0.0
                };
                d * d
            })
            .sum()
    }

    /// `Some(penalty_base + distance^2)` when `x` is outside the box.
    pub fn penalty(&self, x: &[f64], penalty_base: f64) -> Option<f64> {
        if self.contains(x) && x.iter().all(|v| v.is_finite()) {
            None
        } else {
            Some(penalty_base + self.distance_sq(x))
        }
    }
}

/// Wraps a fallible objective: out-of-box points return
/// `penalty_base + distance^2` and points the objective rejects (`None`)
/// return `penalty_base`, in both cases without touching the objective's value.
pub fn penalty_wrap<F>(mut objective: F, bounds: Bounds, penalty_base: f64) -> impl FnMut(&[f64]) -> f64
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    move |x: &[f64]| match bounds.penalty(x, penalty_base) {
        Some(p) => p,
        None => objective(x).unwrap_or(penalty_base),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub max_evals: usize,
    /// Absolute FOM spread below which the simplex counts as converged.
    pub f_tol: f64,
    /// Simplex diameter below which the simplex counts as converged.
    pub x_tol: f64,
    pub restarts: usize,
    /// Initial edge length per coordinate.
    pub init_scale: Vec<f64>,
    /// Re-measure the incumbent at every restart.
    pub reeval_best: bool,
    /// Perturb every initial vertex by uniform noise in `+-scale/2`.
    #[serde(default)]
    pub randomize_init: bool,
    pub rng_seed: u64,
}

impl OptimizerOptions {
    pub fn new(init_scale: Vec<f64>) -> Self {
        Self {
            max_evals: 45,
            f_tol: 1e-3,
            x_tol: 1e-3,
            restarts: 2,
            init_scale,
            reeval_best: true,
            randomize_init: false,
            rng_seed: 0,
        }
    }

    fn check(&self, dim: usize) -> Result<(), OptimizerError> {
        if dim == 0 {
            return Err(OptimizerError::InvalidOptions("empty parameter vector".into()));
        }
        if self.max_evals < dim + 2 {
            return Err(OptimizerError::Budget { max_evals: self.max_evals, needed: dim + 2 });
        }
        if !(self.f_tol > 0.0 && self.x_tol > 0.0) {
            return Err(OptimizerError::InvalidOptions("tolerances must be positive".into()));
        }
        if self.init_scale.len() != dim {
            return Err(OptimizerError::InvalidOptions(format!(
                "init_scale has {} entries for {dim} parameters",
                self.init_scale.len()
            )));
        }
        Ok(())
    }
}

/// Builds `d + 1` vertices: `x0` and `x0 + scale_i e_i`. With a seed, every
/// vertex is then shifted by independent uniform noise in `+-scale_i / 2`.
pub fn init_simplex(x0: &[f64], init_scale: &[f64], randomize_seed: Option<u64>) -> Result<Vec<Vec<f64>>, OptimizerError> {
    if x0.is_empty() {
        return Err(OptimizerError::Degenerate("zero-dimensional problem".into()));
    }
    if init_scale.len() != x0.len() {
        return Err(OptimizerError::Degenerate("scale length differs from dimension".into()));
    }
    if init_scale.iter().any(|s| !(s.is_finite() && *s != 0.0)) {
        return Err(OptimizerError::Degenerate("every scale must be finite and nonzero".into()));
    }
    let mut vertices = vec![x0.to_vec()];
    for (i, s) in init_scale.iter().enumerate() {
        let mut v = x0.to_vec();
        v[i] += s;
        vertices.push(v);
    }
    if let Some(seed) = randomize_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut vertices {
            for (x, s) in v.iter_mut().zip(init_scale) {
                *x += s.abs() * rng.random_range(-0.5..=0.5);
            }
        }
    }
    Ok(vertices)
}

/// Simplex vertices with their FOMs, kept sorted ascending (stable in ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexState {
    pub vertices: Vec<Vec<f64>>,
    pub vertex_foms: Vec<f64>,
    pub eval_count: usize,
    pub restart_count: usize,
}

/// The move a Nelder-Mead step ended with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    Reflect,
    Expand,
    ContractOutside,
    ContractInside,
    Shrink,
}

/// Objective used by [`SimplexState::step`]; `None` means the evaluation
/// was refused (budget exhausted).
pub type Probe<'a> = dyn FnMut(&[f64]) -> Option<f64> + 'a;

fn sanitize(f: f64) -> f64 {
    if f.is_nan() {
        f64::INFINITY
    } else {
        f
    }
}

impl SimplexState {
    /// Evaluates `vertices`; `None` if the probe refuses any of them.
    pub fn evaluate(vertices: Vec<Vec<f64>>, probe: &mut Probe<'_>) -> Option<Self> {
        let mut foms = Vec::with_capacity(vertices.len());
        for v in &vertices {
            foms.push(sanitize(probe(v)?));
        }
        let mut s = Self { eval_count: vertices.len(), vertices, vertex_foms: foms, restart_count: 0 };
        s.sort();
        Some(s)
    }

    /// Builds a state from already known vertex values, without evaluations.
    pub fn from_parts(vertices: Vec<Vec<f64>>, vertex_foms: Vec<f64>) -> Self {
        let mut s = Self { vertices, vertex_foms, eval_count: 0, restart_count: 0 };
        s.sort();
        s
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    pub fn best(&self) -> (&[f64], f64) {
        (&self.vertices[0], self.vertex_foms[0])
    }

    fn sort(&mut self) {
        let mut order: Vec<usize> = (0..self.vertices.len()).collect();
        order.sort_by(|&a, &b| self.vertex_foms[a].total_cmp(&self.vertex_foms[b]));
        self.vertices = order.iter().map(|&i| self.vertices[i].clone()).collect();
        self.vertex_foms = order.iter().map(|&i| self.vertex_foms[i]).collect();
    }

    /// `f_worst - f_best`.
    pub fn spread(&self) -> f64 {
        self.vertex_foms[self.vertex_foms.len() - 1] - self.vertex_foms[0]
    }

    /// Largest Euclidean distance from the best vertex.
    pub fn diameter(&self) -> f64 {
        let best = &self.vertices[0];
        self.vertices[1..]
            .iter()
            .map(|v| v.iter().zip(best).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_converged(&self, f_tol: f64, x_tol: f64) -> bool {
        self.spread() < f_tol && self.diameter() < x_tol
    }

    fn replace_worst(&mut self, x: Vec<f64>, f: f64) {
        let last = self.vertices.len() - 1;
        self.vertices[last] = x;
        self.vertex_foms[last] = f;
        self.sort();
    }

    /// One Nelder-Mead iteration. Returns `None` if the probe refused an
    /// evaluation; vertices evaluated before the refusal are discarded.
    pub fn step(&mut self, probe: &mut Probe<'_>) -> Option<Move> {
        let d = self.dim();
        let n = self.vertices.len();
        let mut centroid = vec![0.0; d];
        for v in &self.vertices[..n - 1] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= (n - 1) as f64);
        let along = |from: &[f64], coef: f64| -> Vec<f64> {
            centroid.iter().zip(from).map(|(c, x)| c + coef * (x - c)).collect()
        };

        let f_best = self.vertex_foms[0];
        let f_second_worst = self.vertex_foms[n - 2];
        let f_worst = self.vertex_foms[n - 1];
        let worst = self.vertices[n - 1].clone();

        let xr = along(&worst, -ALPHA);
        let fr = sanitize(probe(&xr)?);
        self.eval_count += 1;

        if fr < f_best {
            let xe = along(&xr, GAMMA);
            let fe = sanitize(probe(&xe)?);
            self.eval_count += 1;
            if fe < fr {
                self.replace_worst(xe, fe);
                return Some(Move::Expand);
            }
            self.replace_worst(xr, fr);
            return Some(Move::Reflect);
        }
        if fr < f_second_worst {
            self.replace_worst(xr, fr);
            return Some(Move::Reflect);
        }
        if fr < f_worst {
            let xc = along(&xr, RHO);
            let fc = sanitize(probe(&xc)?);
            self.eval_count += 1;
            if fc <= fr {
                self.replace_worst(xc, fc);
                return Some(Move::ContractOutside);
            }
        } else {
            let xc = along(&worst, RHO);
            let fc = sanitize(probe(&xc)?);
            self.eval_count += 1;
            if fc < f_worst {
                self.replace_worst(xc, fc);
                return Some(Move::ContractInside);
            }
        }
        self.shrink(probe)?;
        Some(Move::Shrink)
    }

    fn shrink(&mut self, probe: &mut Probe<'_>) -> Option<()> {
        let best = self.vertices[0].clone();
        let mut shrunk = Vec::with_capacity(self.vertices.len() - 1);
        for v in &self.vertices[1..] {
            let x: Vec<f64> = best.iter().zip(v).map(|(b, x)| b + SIGMA * (x - b)).collect();
            let f = sanitize(probe(&x)?);
            self.eval_count += 1;
            shrunk.push((x, f));
        }
        for (i, (x, f)) in shrunk.into_iter().enumerate() {
            self.vertices[i + 1] = x;
            self.vertex_foms[i + 1] = f;
        }
        self.sort();
        Some(())
    }
}

/// Which part of a run produced an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchPhase {
    Simplex,
    Restart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub index: usize,
    pub params: Vec<f64>,
    pub fom: f64,
    pub phase: SearchPhase,
    /// 0 for the initial simplex, `k` after the `k`-th restart.
    pub segment: usize,
    /// Re-measurement of the incumbent at a restart.
    pub remeasure: bool,
    /// Replaced by a later re-measurement of the same point.
    pub superseded: bool,
}

/// What the optimizer knows about an objective call when it issues it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalContext {
    pub index: usize,
    pub phase: SearchPhase,
    pub segment: usize,
    pub remeasure: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    BudgetExhausted,
    RestartsExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimumReport {
    pub best_params: Vec<f64>,
    pub best_fom: f64,
    /// Index into `history` of the reported optimum.
    pub best_index: usize,
    pub history: Vec<Evaluation>,
    pub moves: Vec<Move>,
    pub termination: Termination,
    pub restarts_used: usize,
}

impl OptimumReport {
    pub fn eval_count(&self) -> usize {
        self.history.len()
    }
}

struct Tracker<'f> {
    objective: &'f mut dyn FnMut(&[f64], EvalContext) -> f64,
    max_evals: usize,
    history: Vec<Evaluation>,
    phase: SearchPhase,
    segment: usize,
}

impl Tracker<'_> {
    fn eval(&mut self, x: &[f64], remeasure: bool) -> Option<f64> {
        if self.history.len() >= self.max_evals {
            return None;
        }
        let ctx = EvalContext { index: self.history.len(), phase: self.phase, segment: self.segment, remeasure };
        let fom = (self.objective)(x, ctx);
        self.history.push(Evaluation {
            index: self.history.len(),
            params: x.to_vec(),
            fom,
            phase: self.phase,
            segment: self.segment,
            remeasure,
            superseded: false,
        });
        Some(fom)
    }

    fn incumbent(&self) -> Option<&Evaluation> {
        self.history
            .iter()
            .filter(|e| !e.superseded)
            .min_by(|a, b| sanitize(a.fom).total_cmp(&sanitize(b.fom)).then(a.index.cmp(&b.index)))
    }
}

/// Runs the simplex to convergence, then restarts up to `options.restarts`
/// times around the incumbent with a doubled, randomly rotated simplex.
pub fn minimize<F>(mut objective: F, x0: &[f64], options: &OptimizerOptions) -> Result<OptimumReport, OptimizerError>
where
    F: FnMut(&[f64]) -> f64,
{
    minimize_with_context(|x, _| objective(x), x0, options)
}

/// [`minimize`] for objectives that need to know where each call comes from.
pub fn minimize_with_context<F>(mut objective: F, x0: &[f64], options: &OptimizerOptions) -> Result<OptimumReport, OptimizerError>
where
    F: FnMut(&[f64], EvalContext) -> f64,
{
    let dim = x0.len();
    options.check(dim)?;
    let initial = init_simplex(x0, &options.init_scale, options.randomize_init.then_some(options.rng_seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.rng_seed ^ 0x5eed_0f_5ca1e);
    let mut tracker = Tracker {
        objective: &mut objective,
        max_evals: options.max_evals,
        history: Vec::new(),
        phase: SearchPhase::Simplex,
        segment: 0,
    };
    let mut moves = Vec::new();
    let mut restarts_used = 0;

    let termination = 'run: {
        let Some(mut state) = SimplexState::evaluate(initial, &mut |x| tracker.eval(x, false)) else {
            break 'run Termination::BudgetExhausted;
        };
        let mut streak = 0;
        loop {
            match state.step(&mut |x| tracker.eval(x, false)) {
                Some(m) => moves.push(m),
                None => break 'run Termination::BudgetExhausted,
            }
            if state.is_converged(options.f_tol, options.x_tol) {
                streak += 1;
            } else {
                streak = 0;
            }
            if streak < CONVERGENCE_STREAK {
                continue;
            }
            if restarts_used == options.restarts {
                break 'run if options.restarts == 0 {
                    Termination::Converged
                } else {
                    Termination::RestartsExhausted
                };
            }
            restarts_used += 1;
            streak = 0;
            tracker.phase = SearchPhase::Restart;
            tracker.segment = restarts_used;
            let inc = tracker.incumbent().expect("history is nonempty").clone();
            let mut center_fom = inc.fom;
            if options.reeval_best {
                let Some(f) = tracker.eval(&inc.params, true) else {
                    break 'run Termination::BudgetExhausted;
                };
                tracker.history[inc.index].superseded = true;
                center_fom = f;
            }
            let vertices = rotated_simplex(&inc.params, &options.init_scale, &mut rng);
            let mut foms = vec![center_fom];
            for v in &vertices[1..] {
                match tracker.eval(v, false) {
                    Some(f) => foms.push(sanitize(f)),
                    None => break 'run Termination::BudgetExhausted,
                }
            }
            state = SimplexState::from_parts(vertices, foms);
            state.eval_count = tracker.history.len();
            state.restart_count = restarts_used;
        }
    };

    let history = tracker.history;
    let best_index = select_best(&history, options.f_tol);
    let best = &history[best_index];
    Ok(OptimumReport {
        best_params: best.params.clone(),
        best_fom: best.fom,
        best_index,
        termination,
        restarts_used,
        moves,
        history,
    })
}

/// Earliest non-superseded evaluation within `f_tol` of the lowest FOM.
fn select_best(history: &[Evaluation], f_tol: f64) -> usize {
    let live = || history.iter().filter(|e| !e.superseded);
    let min = live().map(|e| sanitize(e.fom)).fold(f64::INFINITY, f64::min);
    live()
        .find(|e| sanitize(e.fom) <= min + f_tol)
        .or_else(|| live().next())
        .map_or(0, |e| e.index)
}

/// `center` plus `RESTART_SCALE * scale_i * q_i` for the columns `q_i` of a
/// random orthogonal matrix.
fn rotated_simplex(center: &[f64], scale: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = center.len();
    let gauss = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let q = gauss.qr().q();
    let mut vertices = vec![center.to_vec()];
    for col in 0..d {
        vertices.push(
            (0..d)
                .map(|row| center[row] + RESTART_SCALE * scale[row] * q[(row, col)])
                .collect(),
        );
    }
    vertices
}
