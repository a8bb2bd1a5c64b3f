//! Truncated Lanczos iterations.
//!
//! Starting from a Fock state, the Lanczos recursion builds an orthonormal
//! Krylov basis and the tridiagonal projection `T` of the Hamiltonian. The
//! return probability generated by the leading `m x m` block of `T` is
//! compared against the exact one through a time-averaged absolute deviation;
//! the smallest order `m_c` whose deviation falls under tolerance measures how
//! much of the sector the dynamics actually explores.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::propagator::{ReturnSeries, TimeGrid};
use crate::sector::{FockState, SparseHamiltonian};

pub const DEFAULT_COST_TOL: f64 = 0.01;
pub const BREAKDOWN_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LanczosBasis {
    state: FockState,
    /// `u_0 .. u_{m-1}`
    diagonal: Vec<f64>,
    /// `v_1 .. v_{m-1}`
    offdiagonal: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    exhausted: bool,
}

impl LanczosBasis {
    /// Order-1 basis: the unit vector on `alpha`.
    pub fn new(h: &SparseHamiltonian, alpha: FockState) -> Result<Self> {
        let start = h.basis().basis_vector(alpha)?;
        let mut basis = Self {
            state: alpha,
            diagonal: Vec::new(),
            offdiagonal: Vec::new(),
            vectors: Vec::new(),
            exhausted: false,
        };
        basis.push(h, start);
        Ok(basis)
    }

    fn push(&mut self, h: &SparseHamiltonian, v: Vec<f64>) {
        let mut hv = vec![0.0; v.len()];
        h.apply_unchecked(&v, &mut hv);
        self.diagonal.push(dot(&v, &hv));
        self.vectors.push(v);
    }

    pub fn order(&self) -> usize {
        self.vectors.len()
    }

    pub fn state(&self) -> FockState {
        self.state
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    pub fn offdiagonal(&self) -> &[f64] {
        &self.offdiagonal
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }

    /// Dimension of the full Krylov space, known once the recursion broke down.
    pub fn krylov_dim(&self) -> Option<usize> {
        self.exhausted.then_some(self.order())
    }

    /// Adds one Lanczos vector. Returns `false` on breakdown.
    pub fn step(&mut self, h: &SparseHamiltonian) -> bool {
        if self.exhausted {
            return false;
        }
        let m = self.order();
        let last = &self.vectors[m - 1];
        let mut w = vec![0.0; last.len()];
        h.apply_unchecked(last, &mut w);
        axpy(-self.diagonal[m - 1], last, &mut w);
        if m >= 2 {
            axpy(-self.offdiagonal[m - 2], &self.vectors[m - 2], &mut w);
        }
        // full reorthogonalization, twice
        for _ in 0..2 {
            for v in &self.vectors {
                let c = dot(v, &w);
                axpy(-c, v, &mut w);
            }
        }
        let beta = dot(&w, &w).sqrt();
        if beta < BREAKDOWN_TOL || m == h.dim() {
            self.exhausted = true;
            return false;
        }
        w.iter_mut().for_each(|x| *x /= beta);
        self.offdiagonal.push(beta);
        self.push(h, w);
        true
    }

    /// Extends up to `target` vectors or breakdown, whichever comes first.
    pub fn extend_to(&mut self, h: &SparseHamiltonian, target: usize) {
        while self.order() < target && self.step(h) {}
    }

    /// Largest `|<a_i|a_j> - delta_ij|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.vectors.iter().enumerate() {
            for (j, b) in self.vectors.iter().enumerate().skip(i) {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(a, b) - target).abs());
            }
        }
        worst
    }

    /// Eigenvalues of the leading `order x order` block of `T`.
    pub fn ritz_values(&self, order: usize) -> Vec<f64> {
        let order = order.min(self.order());
        tridiagonal_weights(&self.diagonal[..order], &self.offdiagonal[..order - 1]).0
    }
}

/// Standard Lanczos from `alpha` up to `target_order` vectors.
pub fn lanczos_extend(h: &SparseHamiltonian, alpha: FockState, target_order: usize) -> Result<LanczosBasis> {
    if target_order == 0 {
        return Err(Error::InvalidParameter("Lanczos order must be at least 1".into()));
    }
    let mut basis = LanczosBasis::new(h, alpha)?;
    basis.extend_to(h, target_order);
    Ok(basis)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Eigenvalues of a symmetric tridiagonal matrix together with the squared
/// first components of its normalized eigenvectors, by implicit QL with
/// Wilkinson shifts. Only the first row of the eigenvector matrix is
/// accumulated, so the cost is O(m^2).
pub fn tridiagonal_weights(diagonal: &[f64], offdiagonal: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = diagonal.len();
    assert_eq!(offdiagonal.len() + 1, n.max(1));
    let mut d = diagonal.to_vec();
    let mut e: Vec<f64> = offdiagonal.to_vec();
    e.push(0.0);
    let mut z = vec![0.0; n];
    if n > 0 {
        z[0] = 1.0;
    }
    let scale = d.iter().chain(&e).fold(0.0f64, |m, x| m.max(x.abs()));
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd.max(f64::EPSILON * scale) {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter < 200, "tridiagonal QL failed to converge");
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut underflow = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    (
        order.iter().map(|&k| d[k]).collect(),
        order.iter().map(|&k| z[k] * z[k]).collect(),
    )
}

/// Return probability generated by the leading `order x order` block of `T`:
/// `|(exp(-i T t))_00|^2`.
pub fn tli_return(basis: &LanczosBasis, order: usize, grid: &TimeGrid) -> ReturnSeries {
    let order = order.clamp(1, basis.order());
    let (theta, weight) = tridiagonal_weights(&basis.diagonal[..order], &basis.offdiagonal[..order - 1]);
    let values = grid
        .times()
        .map(|t| {
            let (mut re, mut im) = (0.0, 0.0);
            for (&e, &w) in theta.iter().zip(&weight) {
                let (s, c) = (e * t).sin_cos();
                re += w * c;
                im -= w * s;
            }
            (re * re + im * im).min(1.0)
        })
        .collect();
    ReturnSeries { grid: *grid, values }
}

/// Time-averaged absolute deviation, trapezoid rule on the shared grid.
pub fn cost(exact: &ReturnSeries, approx: &ReturnSeries) -> Result<f64> {
    if exact.grid != approx.grid || exact.values.len() != approx.values.len() {
        return Err(Error::GridMismatch);
    }
    let diff: Vec<f64> = exact
        .values
        .iter()
        .zip(&approx.values)
        .map(|(a, b)| (a - b).abs())
        .collect();
    if diff.len() == 1 {
        return Ok(diff[0]);
    }
    let dt = exact.grid.dt();
    let integral: f64 = diff.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum();
    Ok(integral / exact.grid.span())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TliResult {
    pub state: u64,
    pub m_c: usize,
    pub achieved_cost: f64,
    /// Cost at `m_c - 1`, when `m_c > 1`.
    pub previous_cost: Option<f64>,
    /// Krylov dimension, when the recursion broke down before `m_c` was found.
    pub krylov_dim: Option<usize>,
    pub sector_dim: usize,
}

/// Smallest Lanczos order whose return probability reproduces `exact`
/// within `cost_tol`, scanning `m = 1, 2, ...` on one growing basis.
pub fn find_mc(h: &SparseHamiltonian, alpha: FockState, exact: &ReturnSeries, cost_tol: f64) -> Result<TliResult> {
    let mut basis = LanczosBasis::new(h, alpha)?;
    let mut previous = None;
    loop {
        let m = basis.order();
        let c = cost(exact, &tli_return(&basis, m, &exact.grid))?;
        if c <= cost_tol || !basis.step(h) {
            debug_assert!(previous.is_none_or(|p: f64| p > cost_tol));
            return Ok(TliResult {
                state: alpha.0,
                m_c: m,
                achieved_cost: c,
                previous_cost: previous,
                krylov_dim: basis.krylov_dim(),
                sector_dim: h.dim(),
            });
        }
        previous = Some(c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{sample_constraints, Boundary, ConstraintProfile, EnsembleParams};
    use crate::propagator::{return_probability, Method, PropagatorConfig};
    use crate::sector::DEFAULT_MAX_DIM;
    use crate::spectral::diagonalize;
    use nalgebra::DMatrix;

    fn grid() -> TimeGrid {
        TimeGrid::new(18.0, 0.05).unwrap()
    }

    fn exact(h: &SparseHamiltonian, s: FockState) -> ReturnSeries {
        return_probability(h, s, &grid(), Method::Exact, &PropagatorConfig::default()).unwrap()
    }

    #[test]
    fn tridiagonal_weights_match_dense_eigensolver() {
        let d = [0.3, -1.2, 0.0, 2.5, 0.7, -0.4];
        let e = [1.0, 0.5, 2.0, 0.1, 1.3];
        let (vals, weights) = tridiagonal_weights(&d, &e);
        let m = DMatrix::from_fn(6, 6, |i, j| {
            if i == j {
                d[i]
            } else if i + 1 == j {
                e[i]
            } else if j + 1 == i {
                e[j]
            } else {
                0.0
            }
        });
        let eig = m.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..6)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (k, (ev, w)) in pairs.iter().enumerate() {
            assert!((vals[k] - ev).abs() < 1e-12);
            assert!((weights[k] - w).abs() < 1e-12);
        }
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        assert_eq!(tridiagonal_weights(&[2.0], &[]), (vec![2.0], vec![1.0]));
    }

    #[test]
    fn lanczos_coefficients() {
        let p = ConstraintProfile::pxp(10, Boundary::Periodic).unwrap();
        let h = SparseHamiltonian::from_profile(&p, DEFAULT_MAX_DIM).unwrap();
        let z2 = FockState::neel(10);
        let b = lanczos_extend(&h, z2, 6).unwrap();
        assert_eq!(b.diagonal()[0], 0.0);
        let degree = h.degree(h.basis().index_of(z2).unwrap()) as f64;
        assert!((b.offdiagonal()[0] - degree.sqrt()).abs() < 1e-12);
        assert!(b.orthonormality_defect() < 1e-10);
        assert!(lanczos_extend(&h, z2, 0).is_err());
    }

    #[test]
    fn free_model_breaks_down_at_n_plus_one() {
        for n in [3usize, 6, 8] {
            let p = ConstraintProfile::uniform(n, 0, Boundary::Periodic).unwrap();
            let h = SparseHamiltonian::from_profile(&p, DEFAULT_MAX_DIM).unwrap();
            let b = lanczos_extend(&h, FockState(0), 50).unwrap();
            assert!(b.is_exhausted());
            assert_eq!(b.krylov_dim(), Some(n + 1));
        }
    }

    #[test]
    fn low_orders() {
        let p = ConstraintProfile::pxp(8, Boundary::Periodic).unwrap();
        let h = SparseHamiltonian::from_profile(&p, DEFAULT_MAX_DIM).unwrap();
        let g = grid();
        let b = lanczos_extend(&h, FockState(0), 2).unwrap();
        assert!(tli_return(&b, 1, &g).values.iter().all(|&l| l == 1.0));
        let v1 = b.offdiagonal()[0];
        for (t, l) in g.times().zip(&tli_return(&b, 2, &g).values) {
            assert!((l - (v1 * t).cos().powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_at_breakdown_and_ritz_subset() {
        let g = grid();
        for r in 0..20 {
            let params = EnsembleParams::new(8 + (r as usize % 3) * 2, 1.0 + (r % 4) as f64);
            let p = sample_constraints(&params, 31, r).unwrap();
            let h = SparseHamiltonian::from_profile(&p, DEFAULT_MAX_DIM).unwrap();
            let spec = diagonalize(&h, false, 4096).unwrap();
            let state = h.basis().state((r as usize * 7) % h.dim());
            let b = lanczos_extend(&h, state, h.dim() + 1).unwrap();
            assert!(b.is_exhausted());
            assert!(b.orthonormality_defect() < 1e-8);
            let c = cost(&exact(&h, state), &tli_return(&b, b.order(), &g)).unwrap();
            assert!(c < 1e-8, "cost at breakdown {c}");
            for theta in b.ritz_values(b.order()) {
                let near = spec
                    .eigenvalues
                    .iter()
                    .map(|e| (e - theta).abs())
                    .fold(f64::INFINITY, f64::min);
                assert!(near < 1e-7);
            }
        }
    }

    #[test]
    fn cost_examples() {
        let g = TimeGrid::new(10.0, 0.1).unwrap();
        let a = ReturnSeries {
            grid: g,
            values: g.times().map(|t| (t * 0.3).cos().powi(2)).collect(),
        };
        assert_eq!(cost(&a, &a).unwrap(), 0.0);
        let shifted = ReturnSeries {
            grid: g,
            values: a.values.iter().map(|x| x - 0.125).collect(),
        };
        assert!((cost(&a, &shifted).unwrap() - 0.125).abs() < 1e-12);
        let other = ReturnSeries {
            grid: TimeGrid::new(10.0, 0.2).unwrap(),
            values: vec![0.0; 51],
        };
        assert!(matches!(cost(&a, &other), Err(Error::GridMismatch)));
    }

    #[test]
    fn find_mc_free_and_tiny_sectors() {
        let p = ConstraintProfile::uniform(6, 0, Boundary::Periodic).unwrap();
        let h = SparseHamiltonian::from_profile(&p, DEFAULT_MAX_DIM).unwrap();
        let r = find_mc(&h, FockState(0), &exact(&h, FockState(0)), DEFAULT_COST_TOL).unwrap();
        assert!(r.m_c <= 7);
        assert!(r.achieved_cost <= DEFAULT_COST_TOL);
        assert!(r.previous_cost.is_none_or(|c| c > DEFAULT_COST_TOL));

        let h2 = SparseHamiltonian::from_graph(1, vec![0, 1], vec![vec![1], vec![0]]).unwrap();
        let r = find_mc(&h2, FockState(0), &exact(&h2, FockState(0)), DEFAULT_COST_TOL).unwrap();
        assert!(r.m_c <= 2);
    }

    #[test]
    fn pxp_z2_needs_few_krylov_vectors() {
        let p = ConstraintProfile::pxp(12, Boundary::Periodic).unwrap();
        let h = SparseHamiltonian::from_profile(&p, DEFAULT_MAX_DIM).unwrap();
        let z2 = FockState::neel(12);
        let r = find_mc(&h, z2, &exact(&h, z2), DEFAULT_COST_TOL).unwrap();
        assert_eq!(r.sector_dim, 322);
        assert!(r.m_c < 60, "m_c = {}", r.m_c);
        assert!(r.previous_cost.unwrap() > DEFAULT_COST_TOL);
    }
}
