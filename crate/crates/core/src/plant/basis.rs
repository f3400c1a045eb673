//! Occupation-number basis for `N` bosons on `L` sites.

use std::collections::HashMap;

use nalgebra::DMatrix;

/// Fock states `|n_1, ..., n_L>` with `sum n_i = N`, in descending
/// lexicographic order (so `|N, 0, ..., 0>` comes first).
#[derive(Debug, Clone)]
pub struct FockBasis {
    sites: usize,
    bosons: usize,
    states: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
}

/// `C(n + k - 1, n)` with saturating arithmetic.
pub fn hilbert_dimension(sites: usize, bosons: usize) -> usize {
    if sites == 0 {
        return usize::from(bosons == 0);
    }
    let mut acc: u128 = 1;
    for i in 1..=bosons as u128 {
        acc = acc * (sites as u128 - 1 + i) / i;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

impl FockBasis {
    pub fn new(sites: usize, bosons: usize) -> Self {
        let mut states = Vec::with_capacity(hilbert_dimension(sites, bosons));
        let mut current = vec![0u8; sites];
        fill(&mut current, 0, bosons, &mut states);
        let index = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { sites, bosons, states, index }
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn bosons(&self) -> usize {
        self.bosons
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn state(&self, i: usize) -> &[u8] {
        &self.states[i]
    }

    pub fn states(&self) -> &[Vec<u8>] {
        &self.states
    }

    pub fn index_of(&self, occupations: &[u8]) -> Option<usize> {
        self.index.get(occupations).copied()
    }

    /// Index of the site-reflected state `|n_L, ..., n_1>`.
    pub fn reflected(&self, i: usize) -> usize {
        let mut r = self.states[i].clone();
        r.reverse();
        self.index[&r]
    }
}

fn fill(current: &mut Vec<u8>, site: usize, remaining: usize, out: &mut Vec<Vec<u8>>) {
    if site + 1 == current.len() {
        current[site] = remaining as u8;
        out.push(current.clone());
        return;
    }
    if current.is_empty() {
        return;
    }
    for n in (0..=remaining).rev() {
        current[site] = n as u8;
        fill(current, site + 1, remaining - n, out);
    }
    current[site] = 0;
}

/// Orthonormal bases of the reflection-even and reflection-odd subspaces,
/// stored as the columns of two isometries into the full Fock space.
#[derive(Debug, Clone)]
pub struct ParitySectors {
    pub even: DMatrix<f64>,
    pub odd: DMatrix<f64>,
}

impl ParitySectors {
    pub fn new(basis: &FockBasis) -> Self {
        let dim = basis.dim();
        let mut even_cols: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut odd_cols: Vec<Vec<(usize, f64)>> = Vec::new();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..dim {
            let j = basis.reflected(i);
            if j == i {
                even_cols.push(vec![(i, 1.0)]);
            } else if i < j {
                even_cols.push(vec![(i, h), (j, h)]);
                odd_cols.push(vec![(i, h), (j, -h)]);
            }
        }
        let build = |cols: &[Vec<(usize, f64)>]| {
            let mut m = DMatrix::zeros(dim, cols.len());
            for (c, entries) in cols.iter().enumerate() {
                for &(r, v) in entries {
                    m[(r, c)] = v;
                }
            }
            m
        };
        Self { even: build(&even_cols), odd: build(&odd_cols) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sites_two_bosons() {
        let b = FockBasis::new(2, 2);
        assert_eq!(b.states(), &[vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(b.index_of(&[1, 1]), Some(1));
        assert_eq!(b.reflected(0), 2);
    }

    #[test]
    fn dimensions_match_binomial() {
        for l in 1..=6 {
            for n in 0..=6 {
                assert_eq!(FockBasis::new(l, n).dim(), hilbert_dimension(l, n), "L={l} N={n}");
            }
        }
        assert_eq!(hilbert_dimension(5, 5), 126);
        assert_eq!(hilbert_dimension(8, 8), 6435);
    }

    #[test]
    fn states_are_sorted_and_conserve_number() {
        let b = FockBasis::new(4, 3);
        for w in b.states().windows(2) {
            assert!(w[0] > w[1]);
        }
        assert!(b.states().iter().all(|s| s.iter().map(|&n| n as usize).sum::<usize>() == 3));
    }

    #[test]
    fn parity_sectors_are_complementary_isometries() {
        let b = FockBasis::new(5, 5);
        let p = ParitySectors::new(&b);
        assert_eq!(p.even.ncols() + p.odd.ncols(), b.dim());
        assert_eq!(p.even.ncols(), 66);
        let eye_e = p.even.transpose() * &p.even;
        let cross = p.even.transpose() * &p.odd;
        assert!((eye_e - DMatrix::identity(66, 66)).amax() < 1e-15);
        assert!(cross.amax() < 1e-15);
    }
}
