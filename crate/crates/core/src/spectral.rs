//! Dense diagonalization of sector Hamiltonians, eigenstate overlaps and
//! level-spacing ratios.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sector::{FockState, SparseHamiltonian};

pub const DEFAULT_DENSE_LIMIT: usize = 4096;
pub const DEFAULT_DEGENERACY_TOL: f64 = 1e-8;

/// Mean ratio for Gaussian orthogonal ensemble spectra.
pub const GOE_MEAN_RATIO: f64 = 0.536;
/// Mean ratio for uncorrelated (Poisson) levels.
pub const POISSON_MEAN_RATIO: f64 = 0.386;

#[derive(Debug, Clone)]
pub struct SpectralData {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Column `k` belongs to `eigenvalues[k]`.
    pub eigenvectors: Option<DMatrix<f64>>,
}

pub fn diagonalize(h: &SparseHamiltonian, keep_vectors: bool, dense_limit: usize) -> Result<SpectralData> {
    let dim = h.dim();
    if dim > dense_limit {
        return Err(Error::DenseLimit {
            dim,
            limit: dense_limit,
        });
    }
    Ok(diagonalize_dense(h.to_dense(), keep_vectors))
}

/// Eigendecomposition of a real symmetric matrix, sorted ascending, with each
/// eigenvector's largest-magnitude component made positive.
pub fn diagonalize_dense(matrix: DMatrix<f64>, keep_vectors: bool) -> SpectralData {
    let dim = matrix.nrows();
    if dim == 0 {
        return SpectralData {
            eigenvalues: Vec::new(),
            eigenvectors: keep_vectors.then(|| DMatrix::zeros(0, 0)),
        };
    }
    if !keep_vectors {
        let mut eigenvalues: Vec<f64> = matrix.symmetric_eigenvalues().iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        return SpectralData {
            eigenvalues,
            eigenvectors: None,
        };
    }
    let eig = matrix.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(dim, dim);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = col
            .iter()
            .enumerate()
            .fold(
                (0, 0.0f64),
                |best, (i, &x)| {
                    if x.abs() > best.1.abs() + 1e-12 {
                        (i, x)
                    } else {
                        best
                    }
                },
            )
            .1;
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        vectors.column_mut(dst).copy_from(&(col * sign));
    }
    SpectralData {
        eigenvalues,
        eigenvectors: Some(vectors),
    }
}

impl SpectralData {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Largest violation of `E_k + E_{D-1-k} = 0`.
    pub fn reflection_defect(&self) -> f64 {
        let d = self.dim();
        (0..d)
            .map(|k| (self.eigenvalues[k] + self.eigenvalues[d - 1 - k]).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overlap {
    pub energy: f64,
    pub weight: f64,
}

/// `|<alpha|E_k>|^2` for every eigenstate.
pub fn overlaps(spec: &SpectralData, h: &SparseHamiltonian, alpha: FockState) -> Result<Vec<Overlap>> {
    let vectors = spec.eigenvectors.as_ref().ok_or(Error::MissingEigenvectors)?;
    let row = h.basis().index_of(alpha).ok_or(Error::StateNotInSector(alpha.0))?;
    Ok(spec
        .eigenvalues
        .iter()
        .zip(vectors.row(row).iter())
        .map(|(&energy, &c)| Overlap { energy, weight: c * c })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpacingStats {
    pub ratios: Vec<f64>,
    pub mean: f64,
    /// Distinct levels entering the ratios.
    pub n_levels_used: usize,
    /// Eigenvalues merged into a neighbour as degenerate.
    pub n_collapsed: usize,
    pub degeneracy_tol: f64,
}

/// Ratios `min(d_n, d_{n+1}) / max(d_n, d_{n+1})` of consecutive gaps between
/// distinct levels. Levels closer than `degeneracy_tol` are merged first.
/// `central_fraction`, when set, keeps only that fraction of distinct levels
/// around the middle of the spectrum.
pub fn spacing_ratios(eigenvalues: &[f64], degeneracy_tol: f64, central_fraction: Option<f64>) -> Result<SpacingStats> {
    let mut sorted = eigenvalues.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut levels: Vec<f64> = Vec::with_capacity(sorted.len());
    let mut prev = f64::NEG_INFINITY;
    for &e in &sorted {
        if e - prev > degeneracy_tol {
            levels.push(e);
        }
        prev = e;
    }
    let n_collapsed = sorted.len() - levels.len();
    if let Some(frac) = central_fraction {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "central fraction must lie in (0, 1], got {frac}"
            )));
        }
        let keep = ((levels.len() as f64) * frac).round() as usize;
        let start = (levels.len() - keep) / 2;
        levels = levels[start..start + keep].to_vec();
    }
    if levels.len() < 3 {
        return Err(Error::TooFewLevels(levels.len()));
    }
    let gaps: Vec<f64> = levels.windows(2).map(|w| w[1] - w[0]).collect();
    let ratios: Vec<f64> = gaps.windows(2).map(|g| g[0].min(g[1]) / g[0].max(g[1])).collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(SpacingStats {
        ratios,
        mean,
        n_levels_used: levels.len(),
        n_collapsed,
        degeneracy_tol,
    })
}

/// Uncorrelated levels: cumulative sums of unit exponential gaps.
pub fn poisson_levels<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut e = 0.0;
    (0..n)
        .map(|_| {
            let gap: f64 = Exp1.sample(rng);
            e += gap;
            e
        })
        .collect()
}

/// Eigenvalues of one GOE matrix: Gaussian entries with off-diagonal variance
/// 1/2 and diagonal variance 1, symmetric.
pub fn goe_eigenvalues<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let d: f64 = StandardNormal.sample(rng);
        m[(i, i)] = d;
        for j in 0..i {
            let x: f64 = StandardNormal.sample(rng);
            let x = x * std::f64::consts::FRAC_1_SQRT_2;
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    diagonalize_dense(m, false).eigenvalues
}
