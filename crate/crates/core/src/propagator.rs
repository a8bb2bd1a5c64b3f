//! Time evolution under a sector Hamiltonian.
//!
//! Two propagators are provided: a reference one built on the full
//! eigendecomposition, and a short-iterate Lanczos (Krylov) exponential for
//! sectors beyond the dense limit. Both return the state on every point of a
//! uniform [`TimeGrid`].

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sector::{FockState, SparseHamiltonian};
use crate::spectral::{diagonalize, SpectralData, DEFAULT_DENSE_LIMIT};

pub const DEFAULT_DT: f64 = 0.05;
pub const DEFAULT_KRYLOV_DIM: usize = 30;
pub const DEFAULT_SUBSTEP_TOL: f64 = 1e-10;
const DEFAULT_MAX_SUBSTEPS: usize = 4096;
const NORM_TOL: f64 = 1e-10;

/// Protocol default: 18 for short chains, 50 for long ones.
pub fn default_t_max(n_sites: usize) -> f64 {
    if n_sites < 18 {
        18.0
    } else {
        50.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_max: f64,
    dt: f64,
    n_points: usize,
}

impl TimeGrid {
    pub fn new(t_max: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if !(t_max >= 0.0 && t_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "t_max must be non-negative, got {t_max}"
            )));
        }
        let n_points = (t_max / dt + 1e-9).floor() as usize + 1;
        Ok(Self { t_max, dt, n_points })
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points).map(|k| self.time(k))
    }

    /// Last sampled time, which may fall short of `t_max` by less than `dt`.
    pub fn span(&self) -> f64 {
        self.time(self.n_points - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    pub grid: TimeGrid,
    /// `occupation[k][i]`: probability that spin `i` is up at time `t_k`.
    pub occupation: Vec<Vec<f64>>,
}

impl DensityProfile {
    pub fn site_series(&self, site: usize) -> Vec<f64> {
        self.occupation.iter().map(|row| row[site]).collect()
    }

    /// Local oscillation contrast: peak-to-trough range of `n_site` over
    /// `[t_k, t_k + window]`, for every `t_k` whose window fits the grid.
    pub fn contrast(&self, site: usize, window: f64) -> Vec<f64> {
        let series = self.site_series(site);
        let w = (window / self.grid.dt() + 1e-9).round() as usize;
        if w >= series.len() {
            return Vec::new();
        }
        series
            .windows(w + 1)
            .map(|win| {
                let (lo, hi) = win.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                });
                hi - lo
            })
            .collect()
    }

    /// First `t <= horizon` at which the contrast of `site` drops below half
    /// its value at `t = 0`.
    pub fn contrast_drop_time(&self, site: usize, window: f64, horizon: f64) -> Option<f64> {
        let c = self.contrast(site, window);
        let first = *c.first()?;
        c.iter()
            .enumerate()
            .take_while(|&(k, _)| self.grid.time(k) <= horizon + 1e-9)
            .find(|&(_, &x)| x < 0.5 * first)
            .map(|(k, _)| self.grid.time(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Krylov,
    #[default]
    Auto,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Method::Exact),
            "krylov" => Ok(Method::Krylov),
            "auto" => Ok(Method::Auto),
            other => Err(Error::InvalidParameter(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagatorConfig {
    pub dense_limit: usize,
    pub krylov_dim: usize,
    pub substep_tol: f64,
    pub max_substeps: usize,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        Self {
            dense_limit: DEFAULT_DENSE_LIMIT,
            krylov_dim: DEFAULT_KRYLOV_DIM,
            substep_tol: DEFAULT_SUBSTEP_TOL,
            max_substeps: DEFAULT_MAX_SUBSTEPS,
        }
    }
}

impl PropagatorConfig {
    fn use_exact(&self, method: Method, dim: usize) -> bool {
        match method {
            Method::Exact => true,
            Method::Krylov => false,
            Method::Auto => dim <= self.dense_limit,
        }
    }
}

pub fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn check_initial(h: &SparseHamiltonian, psi0: &[Complex64]) -> Result<()> {
    if psi0.len() != h.dim() {
        return Err(Error::DimensionMismatch {
            expected: h.dim(),
            found: psi0.len(),
        });
    }
    let n = norm(psi0);
    if (n - 1.0).abs() > NORM_TOL {
        return Err(Error::Unnormalized(n));
    }
    Ok(())
}

pub fn fock_vector(h: &SparseHamiltonian, state: FockState) -> Result<Vec<Complex64>> {
    Ok(h.basis()
        .basis_vector(state)?
        .into_iter()
        .map(|x| Complex64::new(x, 0.0))
        .collect())
}

/// Reference propagator: `psi(t) = sum_n exp(-i E_n t) |E_n><E_n|psi(0)>`.
pub fn evolve_exact(
    h: &SparseHamiltonian,
    psi0: &[Complex64],
    grid: &TimeGrid,
    dense_limit: usize,
) -> Result<Vec<Vec<Complex64>>> {
    check_initial(h, psi0)?;
    let spec = diagonalize(h, true, dense_limit)?;
    let mut out = Vec::with_capacity(grid.len());
    evolve_spectral(&spec, psi0, grid, |_, psi| {
        out.push(psi.to_vec());
        Ok(())
    })?;
    Ok(out)
}

/// Streams `psi(t_k)` from a retained eigendecomposition.
pub fn evolve_spectral<F>(spec: &SpectralData, psi0: &[Complex64], grid: &TimeGrid, mut visit: F) -> Result<()>
where
    F: FnMut(usize, &[Complex64]) -> Result<()>,
{
    let v = spec.eigenvectors.as_ref().ok_or(Error::MissingEigenvectors)?;
    let re = DVector::from_iterator(psi0.len(), psi0.iter().map(|z| z.re));
    let im = DVector::from_iterator(psi0.len(), psi0.iter().map(|z| z.im));
    let c_re = v.tr_mul(&re);
    let c_im = v.tr_mul(&im);
    let dim = psi0.len();
    let mut psi = vec![Complex64::default(); dim];
    for (k, t) in grid.times().enumerate() {
        let mut rot_re = DVector::zeros(dim);
        let mut rot_im = DVector::zeros(dim);
        for n in 0..dim {
            let phase = Complex64::from_polar(1.0, -spec.eigenvalues[n] * t);
            let z = phase * Complex64::new(c_re[n], c_im[n]);
            rot_re[n] = z.re;
            rot_im[n] = z.im;
        }
        let out_re = v * rot_re;
        let out_im = v * rot_im;
        for a in 0..dim {
            psi[a] = Complex64::new(out_re[a], out_im[a]);
        }
        visit(k, &psi)?;
    }
    Ok(())
}

/// Lanczos basis of a short Krylov expansion around the current state.
struct KrylovStep {
    vectors: Vec<Vec<Complex64>>,
    tridiag: DMatrix<f64>,
    /// Coupling out of the subspace; zero on happy breakdown.
    residual: f64,
}

impl KrylovStep {
    fn build(h: &SparseHamiltonian, psi: &[Complex64], max_dim: usize) -> Self {
        let dim = psi.len();
        let max_dim = max_dim.min(dim).max(1);
        let scale = norm(psi);
        let mut vectors: Vec<Vec<Complex64>> = vec![psi.iter().map(|z| z / scale).collect()];
        let mut diag = Vec::new();
        let mut off = Vec::new();
        let mut w = vec![Complex64::default(); dim];
        let residual;
        loop {
            let j = vectors.len() - 1;
            h.apply_unchecked(&vectors[j], &mut w);
            let alpha: f64 = vectors[j].iter().zip(&w).map(|(a, b)| (a.conj() * b).re).sum();
            diag.push(alpha);
            // Two passes of full Gram-Schmidt keep the basis orthonormal to
            // machine precision.
            for _ in 0..2 {
                for v in &vectors {
                    let proj: Complex64 = v.iter().zip(&w).map(|(a, b)| a.conj() * b).sum();
                    for (x, y) in w.iter_mut().zip(v) {
                        *x -= proj * y;
                    }
                }
            }
            let beta = norm(&w);
            if vectors.len() == max_dim || beta < 1e-12 {
                residual = if beta < 1e-12 { 0.0 } else { beta };
                break;
            }
            off.push(beta);
            vectors.push(w.iter().map(|z| z / beta).collect());
        }
        let m = vectors.len();
        let mut tridiag = DMatrix::zeros(m, m);
        for i in 0..m {
            tridiag[(i, i)] = diag[i];
            if i + 1 < m {
                tridiag[(i, i + 1)] = off[i];
                tridiag[(i + 1, i)] = off[i];
            }
        }
        Self {
            vectors,
            tridiag,
            residual,
        }
    }
}

/// Coefficients of `exp(-i T t) e_0` from the eigendecomposition of `T`.
fn expm_first_column(eig: &nalgebra::SymmetricEigen<f64, nalgebra::Dyn>, t: f64) -> Vec<Complex64> {
    let m = eig.eigenvalues.len();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|k| {
                    let q = eig.eigenvectors[(i, k)] * eig.eigenvectors[(0, k)];
                    Complex64::from_polar(q, -eig.eigenvalues[k] * t)
                })
                .sum()
        })
        .collect()
}

/// Advances `psi` by `span` with adaptive substeps.
fn krylov_advance(
    h: &SparseHamiltonian,
    psi: &mut [Complex64],
    span: f64,
    t_start: f64,
    cfg: &PropagatorConfig,
) -> Result<()> {
    let mut remaining = span;
    let mut substeps = 0;
    while remaining > 0.0 {
        let step = KrylovStep::build(h, psi, cfg.krylov_dim);
        let eig = step.tridiag.clone().symmetric_eigen();
        let mut tau = remaining;
        let coeffs = loop {
            let c = expm_first_column(&eig, tau);
            let err = step.residual * c.last().map_or(0.0, |z| z.norm());
            if err <= cfg.substep_tol {
                break c;
            }
            tau *= 0.5;
            substeps += 1;
            if substeps > cfg.max_substeps {
                return Err(Error::KrylovConvergence {
                    time: t_start + span - remaining,
                    substeps,
                });
            }
        };
        let scale = norm(psi);
        psi.iter_mut().for_each(|z| *z = Complex64::default());
        for (c, v) in coeffs.iter().zip(&step.vectors) {
            let c = c * scale;
            for (x, y) in psi.iter_mut().zip(v) {
                *x += c * y;
            }
        }
        let n = norm(psi);
        psi.iter_mut().for_each(|z| *z /= n);
        remaining -= tau;
        if remaining < 1e-14 * span.max(1.0) {
            remaining = 0.0;
        }
        substeps += 1;
        if substeps > cfg.max_substeps {
            return Err(Error::KrylovConvergence {
                time: t_start + span - remaining,
                substeps,
            });
        }
    }
    Ok(())
}

/// Streams `psi(t_k)` from the Krylov propagator.
pub fn evolve_krylov_with<F>(
    h: &SparseHamiltonian,
    psi0: &[Complex64],
    grid: &TimeGrid,
    cfg: &PropagatorConfig,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &[Complex64]) -> Result<()>,
{
    check_initial(h, psi0)?;
    let mut psi = psi0.to_vec();
    visit(0, &psi)?;
    for k in 1..grid.len() {
        krylov_advance(h, &mut psi, grid.dt(), grid.time(k - 1), cfg)?;
        visit(k, &psi)?;
    }
    Ok(())
}

pub fn evolve_krylov(
    h: &SparseHamiltonian,
    psi0: &[Complex64],
    grid: &TimeGrid,
    cfg: &PropagatorConfig,
) -> Result<Vec<Vec<Complex64>>> {
    let mut out = Vec::with_capacity(grid.len());
    evolve_krylov_with(h, psi0, grid, cfg, |_, psi| {
        out.push(psi.to_vec());
        Ok(())
    })?;
    Ok(out)
}

fn evolve_with<F>(
    h: &SparseHamiltonian,
    psi0: &[Complex64],
    grid: &TimeGrid,
    method: Method,
    cfg: &PropagatorConfig,
    visit: F,
) -> Result<()>
where
    F: FnMut(usize, &[Complex64]) -> Result<()>,
{
    if cfg.use_exact(method, h.dim()) {
        check_initial(h, psi0)?;
        let spec = diagonalize(h, true, cfg.dense_limit)?;
        evolve_spectral(&spec, psi0, grid, visit)
    } else {
        evolve_krylov_with(h, psi0, grid, cfg, visit)
    }
}

fn finish_series(grid: &TimeGrid, mut values: Vec<f64>) -> ReturnSeries {
    // L(0) = 1 holds analytically; pin it against rounding.
    values[0] = 1.0;
    for v in &mut values {
        *v = v.clamp(0.0, 1.0);
    }
    ReturnSeries { grid: *grid, values }
}

pub fn return_probability(
    h: &SparseHamiltonian,
    alpha: FockState,
    grid: &TimeGrid,
    method: Method,
    cfg: &PropagatorConfig,
) -> Result<ReturnSeries> {
    let row = h.basis().index_of(alpha).ok_or(Error::StateNotInSector(alpha.0))?;
    if cfg.use_exact(method, h.dim()) {
        let spec = diagonalize(h, true, cfg.dense_limit)?;
        return Ok(SpectralReturns::new(&spec, grid)?.series(&[row]).remove(0));
    }
    let psi0 = fock_vector(h, alpha)?;
    let mut values = Vec::with_capacity(grid.len());
    evolve_krylov_with(h, &psi0, grid, cfg, |_, psi| {
        values.push(psi[row].norm_sqr());
        Ok(())
    })?;
    Ok(finish_series(grid, values))
}

pub fn site_density(
    h: &SparseHamiltonian,
    psi0: &[Complex64],
    grid: &TimeGrid,
    method: Method,
    cfg: &PropagatorConfig,
) -> Result<DensityProfile> {
    let n_sites = h.basis().n_sites();
    let states = h.basis().states();
    let mut occupation = Vec::with_capacity(grid.len());
    evolve_with(h, psi0, grid, method, cfg, |_, psi| {
        let mut row = vec![0.0; n_sites];
        for (amp, &bits) in psi.iter().zip(states) {
            let p = amp.norm_sqr();
            let mut b = bits;
            while b != 0 {
                row[b.trailing_zeros() as usize] += p;
                b &= b - 1;
            }
        }
        row.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        occupation.push(row);
        Ok(())
    })?;
    Ok(DensityProfile {
        grid: *grid,
        occupation,
    })
}

/// Batched return probabilities of Fock states from one eigendecomposition:
/// `L_a(t) = |sum_n V_an^2 exp(-i E_n t)|^2`.
pub struct SpectralReturns<'a> {
    spec: &'a SpectralData,
    grid: TimeGrid,
    cos: DMatrix<f64>,
    sin: DMatrix<f64>,
}

impl<'a> SpectralReturns<'a> {
    pub fn new(spec: &'a SpectralData, grid: &TimeGrid) -> Result<Self> {
        if spec.eigenvectors.is_none() {
            return Err(Error::MissingEigenvectors);
        }
        let d = spec.dim();
        let cos = DMatrix::from_fn(d, grid.len(), |n, k| (spec.eigenvalues[n] * grid.time(k)).cos());
        let sin = DMatrix::from_fn(d, grid.len(), |n, k| (spec.eigenvalues[n] * grid.time(k)).sin());
        Ok(Self {
            spec,
            grid: *grid,
            cos,
            sin,
        })
    }

    /// Series for the given basis rows, in order.
    pub fn series(&self, rows: &[usize]) -> Vec<ReturnSeries> {
        let v = self.spec.eigenvectors.as_ref().expect("checked in new");
        let d = self.spec.dim();
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(256) {
            let weights = DMatrix::from_fn(chunk.len(), d, |r, n| {
                let x = v[(chunk[r], n)];
                x * x
            });
            let re = &weights * &self.cos;
            let im = &weights * &self.sin;
            for r in 0..chunk.len() {
                let values = (0..self.grid.len())
                    .map(|k| re[(r, k)].powi(2) + im[(r, k)].powi(2))
                    .collect();
                out.push(finish_series(&self.grid, values));
            }
        }
        out
    }
}
