//! Reference computations for the acceptance suite, written independently of
//! the plant's sector-resolved propagator.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Occupation lists of `bosons` on `sites`, in no particular order.
pub fn fock_states(sites: usize, bosons: usize) -> Vec<Vec<u8>> {
    if sites == 1 {
        return vec![vec![bosons as u8]];
    }
    let mut out = Vec::new();
    for first in 0..=bosons {
        for mut rest in fock_states(sites - 1, bosons - first) {
            rest.insert(0, first as u8);
            out.push(rest);
        }
    }
    out
}

/// Open-chain `-J sum (b_i^+ b_{i+1} + h.c.) + U/2 sum n_i (n_i - 1)` over `states`.
pub fn bose_hubbard(states: &[Vec<u8>], j: f64, u: f64) -> DMatrix<f64> {
    let find = |occ: &[u8]| states.iter().position(|s| s.as_slice() == occ).expect("closed basis");
    let mut h = DMatrix::zeros(states.len(), states.len());
    for (a, s) in states.iter().enumerate() {
        h[(a, a)] = 0.5 * u * s.iter().map(|&n| n as f64 * (n as f64 - 1.0)).sum::<f64>();
        for site in 0..s.len() - 1 {
            for (from, to) in [(site, site + 1), (site + 1, site)] {
                if s[from] == 0 {
                    continue;
                }
                let amp = (s[from] as f64 * (s[to] as f64 + 1.0)).sqrt();
                let mut t = s.clone();
                t[from] -= 1;
                t[to] += 1;
                h[(find(&t), a)] -= j * amp;
            }
        }
    }
    h
}

/// `exp(-i H t)` from a degree-30 Taylor series with scaling and squaring.
pub fn expm_minus_i(h: &DMatrix<f64>, t: f64) -> DMatrix<Complex64> {
    let n = h.nrows();
    let a = h.map(|x| Complex64::new(0.0, -x * t));
    let norm = a.row_iter().map(|r| r.iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = a.map(|z| z / 2f64.powi(squarings));
    let mut term = DMatrix::<Complex64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=30 {
        term = &term * &a / Complex64::new(k as f64, 0.0);
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// `|<a|b>|^2` for normalized vectors.
pub fn overlap(a: &DVector<Complex64>, b: &DVector<Complex64>) -> f64 {
    a.dotc(b).norm_sqr()
}
