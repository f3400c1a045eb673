//! Bose-Hubbard Hamiltonian, ground states and piecewise-constant propagation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use super::basis::{FockBasis, ParitySectors};
use super::{Boundary, HubbardConfig, PlantError};
use crate::waveform::Waveform;

/// Unit-norm amplitudes over a [`FockBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    pub amplitudes: DVector<Complex64>,
}

impl QuantumState {
    pub fn new(amplitudes: DVector<Complex64>) -> Self {
        Self { amplitudes }
    }

    pub fn from_real(v: &DVector<f64>) -> Self {
        Self { amplitudes: v.map(|x| Complex64::new(x, 0.0)) }
    }

    /// The Fock state with the given occupations.
    pub fn fock(basis: &FockBasis, occupations: &[u8]) -> Option<Self> {
        let i = basis.index_of(occupations)?;
        let mut amplitudes = DVector::zeros(basis.dim());
        amplitudes[i] = Complex64::new(1.0, 0.0);
        Some(Self { amplitudes })
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &QuantumState) -> Complex64 {
        self.amplitudes
            .iter()
            .zip(other.amplitudes.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// `|<self|other>|^2`.
    pub fn overlap(&self, other: &QuantumState) -> f64 {
        self.inner(other).norm_sqr()
    }

    /// `<self|H|self>` for a real symmetric `H`.
    pub fn expectation(&self, h: &DMatrix<f64>) -> f64 {
        let re = self.amplitudes.map(|a| a.re);
        let im = self.amplitudes.map(|a| a.im);
        re.dot(&(h * &re)) + im.dot(&(h * &im))
    }
}

/// Lowest eigenpair with its phase fixed.
#[derive(Debug, Clone)]
pub struct GroundState {
    pub state: QuantumState,
    pub energy: f64,
    /// Distance to the next level, across both parity sectors.
    pub gap: f64,
    pub degenerate: bool,
}

/// Gap below which a ground state is flagged degenerate.
pub const DEGENERACY_GAP: f64 = 1e-10;

struct SectorEigen {
    values: DVector<f64>,
    /// Eigenvectors lifted into the full Fock space.
    vectors: DMatrix<f64>,
}

/// `H(J, U) = J K + U D` split into reflection sectors, with the
/// depth-independent pieces assembled once per configuration.
#[derive(Debug, Clone)]
pub struct LatticeModel {
    config: HubbardConfig,
    basis: FockBasis,
    hopping: DMatrix<f64>,
    interaction: DVector<f64>,
    sectors: ParitySectors,
    // per-sector K and D
    hopping_even: DMatrix<f64>,
    hopping_odd: DMatrix<f64>,
    interaction_even: DMatrix<f64>,
    interaction_odd: DMatrix<f64>,
}

impl LatticeModel {
    pub fn new(config: &HubbardConfig) -> Result<Self, PlantError> {
        config.check()?;
        let basis = FockBasis::new(config.sites, config.bosons);
        let hopping = hopping_matrix(&basis, config.boundary);
        let interaction = DVector::from_iterator(
            basis.dim(),
            basis
                .states()
                .iter()
                .map(|s| s.iter().map(|&n| 0.5 * n as f64 * (n as f64 - 1.0)).sum()),
        );
        let sectors = ParitySectors::new(&basis);
        let diag = DMatrix::from_diagonal(&interaction);
        let project = |p: &DMatrix<f64>, m: &DMatrix<f64>| p.transpose() * m * p;
        Ok(Self {
            hopping_even: project(&sectors.even, &hopping),
            hopping_odd: project(&sectors.odd, &hopping),
            interaction_even: project(&sectors.even, &diag),
            interaction_odd: project(&sectors.odd, &diag),
            config: config.clone(),
            basis,
            hopping,
            interaction,
            sectors,
        })
    }

    pub fn config(&self) -> &HubbardConfig {
        &self.config
    }

    pub fn basis(&self) -> &FockBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// Full Hamiltonian in the occupation basis.
    pub fn hamiltonian(&self, j: f64, u: f64) -> DMatrix<f64> {
        let mut h = &self.hopping * j;
        for (i, d) in self.interaction.iter().enumerate() {
            h[(i, i)] += u * d;
        }
        h
    }

    /// Hamiltonian at lattice depth `s` after clamping to the mapping's floor.
    pub fn hamiltonian_at_depth(&self, s: f64) -> DMatrix<f64> {
        let (j, u) = self.config.mapping.hubbard_clamped(s);
        self.hamiltonian(j, u)
    }

    /// Eigendecompositions of the sectors selected by `active`.
    fn sector_eigen(&self, j: f64, u: f64, active: [bool; 2]) -> [Option<SectorEigen>; 2] {
        let solve = |k: &DMatrix<f64>, d: &DMatrix<f64>, p: &DMatrix<f64>, on: bool| {
            if !on || k.nrows() == 0 {
                return None;
            }
            let eig = SymmetricEigen::new(k * j + d * u);
            Some(SectorEigen { values: eig.eigenvalues, vectors: p * eig.eigenvectors })
        };
        [
            solve(&self.hopping_even, &self.interaction_even, &self.sectors.even, active[0]),
            solve(&self.hopping_odd, &self.interaction_odd, &self.sectors.odd, active[1]),
        ]
    }

    /// Sectors in which `state` has any nonzero component. Propagation keeps
    /// an exactly reflection-symmetric state exactly symmetric, so a sector
    /// that starts empty stays empty.
    fn active_sectors(&self, state: &QuantumState) -> [bool; 2] {
        let re = state.amplitudes.map(|a| a.re);
        let im = state.amplitudes.map(|a| a.im);
        let occupied = |p: &DMatrix<f64>| {
            p.ncols() > 0 && p.tr_mul(&re).iter().chain(p.tr_mul(&im).iter()).any(|&x| x != 0.0)
        };
        [occupied(&self.sectors.even), occupied(&self.sectors.odd)]
    }

    pub fn ground_state(&self, j: f64, u: f64) -> GroundState {
        let sectors = self.sector_eigen(j, u, [true, true]);
        let mut levels: Vec<(f64, usize, usize)> = Vec::with_capacity(self.dim());
        for (s, eig) in sectors.iter().enumerate() {
            if let Some(eig) = eig {
                levels.extend(eig.values.iter().enumerate().map(|(k, &e)| (e, s, k)));
            }
        }
        levels.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (energy, sector, k) = levels[0];
        let gap = levels.get(1).map_or(f64::INFINITY, |l| l.0 - energy);
        let degenerate = gap < DEGENERACY_GAP;
        if degenerate {
            log::warn!("degenerate ground state (gap {gap:e}) at J={j}, U={u}");
        }
        let eig = sectors[sector].as_ref().expect("sector holding the minimum exists");
        let mut v: DVector<f64> = eig.vectors.column(k).into_owned();
        fix_phase(&mut v);
        GroundState { state: QuantumState::from_real(&v), energy, gap, degenerate }
    }

    pub fn ground_state_at_depth(&self, s: f64) -> GroundState {
        let (j, u) = self.config.mapping.hubbard_clamped(s);
        self.ground_state(j, u)
    }

    /// Applies `exp(-i H(J, U) kappa dt)` to `state`.
    fn propagate(&self, state: &mut QuantumState, eig: &[Option<SectorEigen>; 2], phase_per_energy: f64) {
        let re = state.amplitudes.map(|a| a.re);
        let im = state.amplitudes.map(|a| a.im);
        let mut out_re = DVector::zeros(self.dim());
        let mut out_im = DVector::zeros(self.dim());
        for e in eig.iter().flatten() {
            let v = &e.vectors;
            let c_re = v.tr_mul(&re);
            let c_im = v.tr_mul(&im);
            let mut r = DVector::zeros(c_re.len());
            let mut i = DVector::zeros(c_re.len());
            for k in 0..c_re.len() {
                let (sin, cos) = (-e.values[k] * phase_per_energy).sin_cos();
                r[k] = c_re[k] * cos - c_im[k] * sin;
                i[k] = c_re[k] * sin + c_im[k] * cos;
            }
            out_re += v * r;
            out_im += v * i;
        }
        state.amplitudes = DVector::from_iterator(
            self.dim(),
            out_re.iter().zip(out_im.iter()).map(|(&r, &i)| Complex64::new(r, i)),
        );
    }

    /// Evolves under a piecewise-constant Hamiltonian: interval `k` uses the
    /// midpoint depth of samples `k` and `k + 1`, clamped to the mapping floor.
    pub fn evolve(&self, state: &QuantumState, waveform: &Waveform) -> Result<QuantumState, PlantError> {
        self.check_state(state)?;
        let mut psi = state.clone();
        let active = self.active_sectors(state);
        let kappa = self.config.time_scale;
        let mut cached: Option<(f64, [Option<SectorEigen>; 2])> = None;
        for w in waveform.samples.windows(2) {
            let s_mid = 0.5 * (w[0] + w[1]);
            let (j, u) = self.config.mapping.hubbard_clamped(s_mid);
            if cached.as_ref().map_or(true, |(key, _)| *key != j) {
                cached = Some((j, self.sector_eigen(j, u, active)));
            }
            let (_, eig) = cached.as_ref().expect("just filled");
            self.propagate(&mut psi, eig, kappa * waveform.dt);
        }
        self.check_norm(&psi)?;
        Ok(psi)
    }

    /// Free evolution at fixed depth `s` for `duration` control-time units.
    pub fn hold(&self, state: &QuantumState, s: f64, duration: f64) -> Result<QuantumState, PlantError> {
        self.check_state(state)?;
        let mut psi = state.clone();
        if duration > 0.0 {
            let (j, u) = self.config.mapping.hubbard_clamped(s);
            let eig = self.sector_eigen(j, u, self.active_sectors(state));
            self.propagate(&mut psi, &eig, self.config.time_scale * duration);
        }
        self.check_norm(&psi)?;
        Ok(psi)
    }

    fn check_state(&self, state: &QuantumState) -> Result<(), PlantError> {
        if state.dim() != self.dim() {
            return Err(PlantError::InvalidConfig(format!(
                "state dimension {} does not match basis dimension {}",
                state.dim(),
                self.dim()
            )));
        }
        self.check_norm(state)
    }

    fn check_norm(&self, state: &QuantumState) -> Result<(), PlantError> {
        let norm = state.norm();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(PlantError::NormDrift { norm });
        }
        Ok(())
    }
}

/// Largest tolerated deviation of a state's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-8;

/// Makes the largest-magnitude amplitude positive; near-ties go to the lowest index.
fn fix_phase(v: &mut DVector<f64>) {
    let max = v.amax();
    let pivot = v
        .iter()
        .position(|x| x.abs() >= max - 1e-12 * max)
        .expect("nonempty vector");
    if v[pivot] < 0.0 {
        v.neg_mut();
    }
}

fn bonds(sites: usize, boundary: Boundary) -> Vec<(usize, usize)> {
    let mut b: Vec<_> = (0..sites.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    if boundary == Boundary::Periodic && sites > 2 {
        b.push((sites - 1, 0));
    }
    b
}

/// `K = -sum_<ij> (b_i^dag b_j + h.c.)`.
fn hopping_matrix(basis: &FockBasis, boundary: Boundary) -> DMatrix<f64> {
    let dim = basis.dim();
    let mut k = DMatrix::zeros(dim, dim);
    let bonds = bonds(basis.sites(), boundary);
    let mut scratch = Vec::with_capacity(basis.sites());
    for (col, state) in basis.states().iter().enumerate() {
        for &(i, j) in &bonds {
            for (to, from) in [(i, j), (j, i)] {
                if state[from] == 0 {
                    continue;
                }
                let amp = (state[from] as f64 * (state[to] as f64 + 1.0)).sqrt();
                scratch.clear();
                scratch.extend_from_slice(state);
                scratch[from] -= 1;
                scratch[to] += 1;
                let row = basis.index_of(&scratch).expect("hop stays in the basis");
                k[(row, col)] -= amp;
            }
        }
    }
    k
}
