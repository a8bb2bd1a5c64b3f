//! Disorder-ensemble sweeps over the mean constraint range.
//!
//! A sweep is a flat, deterministic list of realisation tasks, one per
//! `(mu/N, realisation_index)`. Tasks run in parallel and produce
//! self-contained outcome records; aggregation sorts the records before
//! summing, so the statistics depend only on the set of outcomes and never on
//! scheduling or on how a sweep was split across runs.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lls::{classify_lls, scan_candidates, sector_return_series, LlsCriterion, ScanOptions};
use crate::profile::{
    canonical_mu_over_n, mix64, point_seed, sample_constraints, Boundary, ConstraintProfile, EnsembleParams,
};
use crate::propagator::TimeGrid;
use crate::sector::{SparseHamiltonian, DEFAULT_MAX_DIM};
use crate::spectral::{diagonalize, spacing_ratios};
use crate::symmetry::resolved_spacing_ratios;
use crate::tli::find_mc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub n_sites: usize,
    pub mu_over_n: Vec<f64>,
    pub n_realisations: usize,
    /// First realisation index; split runs use disjoint index ranges.
    pub realisation_start: u64,
    pub epsilon: u32,
    pub min_range: u32,
    pub boundary: Boundary,
    pub master_seed: u64,
    pub max_dim: usize,
}

impl SweepSpec {
    pub fn new(n_sites: usize, mu_over_n: Vec<f64>, n_realisations: usize, master_seed: u64) -> Self {
        Self {
            n_sites,
            mu_over_n,
            n_realisations,
            realisation_start: 0,
            epsilon: 1,
            min_range: 1,
            boundary: Boundary::Periodic,
            master_seed,
            max_dim: DEFAULT_MAX_DIM,
        }
    }

    pub fn params(&self, mu_over_n: f64) -> EnsembleParams {
        EnsembleParams {
            n_sites: self.n_sites,
            mu: canonical_mu_over_n(canonical_mu_over_n(mu_over_n) * self.n_sites as f64),
            epsilon: self.epsilon,
            min_range: self.min_range,
            boundary: self.boundary,
        }
    }

    pub fn tasks(&self) -> Result<Vec<Task>> {
        if self.n_realisations == 0 {
            return Err(Error::InvalidParameter("need at least one realisation".into()));
        }
        let mut tasks = Vec::with_capacity(self.mu_over_n.len() * self.n_realisations);
        for &x in &self.mu_over_n {
            let x = canonical_mu_over_n(x);
            self.params(x).validate()?;
            let seed = point_seed(self.master_seed, x);
            for j in 0..self.n_realisations as u64 {
                tasks.push(Task {
                    mu_over_n: x,
                    params: self.params(x),
                    seed,
                    realisation_index: self.realisation_start + j,
                });
            }
        }
        Ok(tasks)
    }
}

/// One realisation: everything needed to rebuild its profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Task {
    pub mu_over_n: f64,
    pub params: EnsembleParams,
    pub seed: u64,
    pub realisation_index: u64,
}

impl Task {
    pub fn profile(&self) -> Result<ConstraintProfile> {
        sample_constraints(&self.params, self.seed, self.realisation_index)
    }

    pub fn hamiltonian(&self, max_dim: usize) -> Result<SparseHamiltonian> {
        SparseHamiltonian::from_profile(&self.profile()?, max_dim)
    }

    /// Seeds the candidate subsample of oversized sectors.
    pub fn sample_seed(&self) -> u64 {
        mix64(self.seed ^ mix64(self.realisation_index.wrapping_add(1)))
    }
}

/// Per-realisation LLS result. `error` is set for excluded realisations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlsOutcome {
    pub mu_over_n: f64,
    pub mu: f64,
    pub n_sites: usize,
    pub realisation_index: u64,
    pub seed: u64,
    pub dim: usize,
    pub n_scanned: usize,
    pub n_lls: usize,
    pub rho: f64,
    pub error: Option<String>,
}

impl LlsOutcome {
    fn failed(task: &Task, err: &Error) -> Self {
        warn!(
            "realisation {} at mu/N = {} excluded: {err}",
            task.realisation_index, task.mu_over_n
        );
        Self {
            mu_over_n: task.mu_over_n,
            mu: task.params.mu,
            n_sites: task.params.n_sites,
            realisation_index: task.realisation_index,
            seed: task.seed,
            dim: 0,
            n_scanned: 0,
            n_lls: 0,
            rho: 0.0,
            error: Some(err.to_string()),
        }
    }
}

/// Scans one realisation against several criteria, sharing the evolution.
pub fn lls_realisation(
    task: &Task,
    grid: &TimeGrid,
    criteria: &[LlsCriterion],
    options: &ScanOptions,
    max_dim: usize,
) -> Vec<LlsOutcome> {
    let run = || -> Result<Vec<LlsOutcome>> {
        let h = task.hamiltonian(max_dim)?;
        let opts = ScanOptions {
            sample_seed: task.sample_seed(),
            ..*options
        };
        let scans = crate::lls::scan_sector_multi(&h, grid, criteria, &opts)?;
        Ok(scans
            .into_iter()
            .map(|scan| LlsOutcome {
                mu_over_n: task.mu_over_n,
                mu: task.params.mu,
                n_sites: task.params.n_sites,
                realisation_index: task.realisation_index,
                seed: task.seed,
                dim: scan.dim,
                n_scanned: scan.n_scanned,
                n_lls: scan.n_lls,
                rho: scan.rho,
                error: None,
            })
            .collect())
    };
    run().unwrap_or_else(|e| vec![LlsOutcome::failed(task, &e); criteria.len()])
}

/// Outcomes indexed `[criterion][task]`.
pub fn lls_outcomes(
    sweep: &SweepSpec,
    grid: &TimeGrid,
    criteria: &[LlsCriterion],
    options: &ScanOptions,
) -> Result<Vec<Vec<LlsOutcome>>> {
    let tasks = sweep.tasks()?;
    let per_task: Vec<Vec<LlsOutcome>> = tasks
        .par_iter()
        .map(|t| lls_realisation(t, grid, criteria, options, sweep.max_dim))
        .collect();
    Ok((0..criteria.len())
        .map(|c| per_task.iter().map(|o| o[c].clone()).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePoint {
    pub mu: f64,
    pub mu_over_n: f64,
    pub n_sites: usize,
    pub realisations: usize,
    pub p: f64,
    pub p_err: f64,
    pub rho_mean: f64,
    pub rho_stderr: f64,
    pub mean_sector_dim: f64,
    pub excluded: usize,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn group_by_point<T, F>(records: &[T], key: F) -> BTreeMap<u64, Vec<&T>>
where
    F: Fn(&T) -> (f64, u64),
{
    let mut groups: BTreeMap<u64, Vec<&T>> = BTreeMap::new();
    for r in records {
        let (x, _) = key(r);
        // mu/N >= 0, so the bit pattern orders like the value
        groups.entry(canonical_mu_over_n(x).to_bits()).or_default().push(r);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|r| key(r).1);
    }
    groups
}

/// Rejects outcome sets holding the same realisation twice.
fn check_unique<T, F>(records: &[T], key: F) -> Result<()>
where
    F: Fn(&T) -> (f64, u64),
{
    let mut seen = std::collections::HashSet::new();
    for r in records {
        let (x, idx) = key(r);
        if !seen.insert((canonical_mu_over_n(x).to_bits(), idx)) {
            return Err(Error::Merge(format!(
                "realisation {idx} at mu/N = {x} appears more than once"
            )));
        }
    }
    Ok(())
}

pub fn aggregate_lls(outcomes: &[LlsOutcome]) -> Result<Vec<EnsemblePoint>> {
    let key = |o: &LlsOutcome| (o.mu_over_n, o.realisation_index);
    check_unique(outcomes, key)?;
    Ok(group_by_point(outcomes, key)
        .into_values()
        .map(|group| {
            let first = group[0];
            let ok: Vec<&LlsOutcome> = group.iter().copied().filter(|o| o.error.is_none()).collect();
            let n = ok.len();
            let hits: Vec<f64> = ok.iter().map(|o| if o.n_lls > 0 { 1.0 } else { 0.0 }).collect();
            let rhos: Vec<f64> = ok.iter().map(|o| o.rho).collect();
            let p = if n > 0 {
                hits.iter().sum::<f64>() / n as f64
            } else {
                f64::NAN
            };
            let (rho_mean, rho_stderr) = mean_stderr(&rhos);
            EnsemblePoint {
                mu: first.mu,
                mu_over_n: first.mu_over_n,
                n_sites: first.n_sites,
                realisations: n,
                p,
                p_err: (p * (1.0 - p) / n as f64).sqrt(),
                rho_mean,
                rho_stderr,
                mean_sector_dim: ok.iter().map(|o| o.dim as f64).sum::<f64>() / n as f64,
                excluded: group.len() - n,
            }
        })
        .collect())
}

pub fn ensemble_statistics(
    sweep: &SweepSpec,
    grid: &TimeGrid,
    criterion: &LlsCriterion,
    options: &ScanOptions,
) -> Result<Vec<EnsemblePoint>> {
    aggregate_lls(&lls_outcomes(sweep, grid, std::slice::from_ref(criterion), options)?.remove(0))
}

/// Per-realisation Krylov-dimension result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOutcome {
    pub mu_over_n: f64,
    pub mu: f64,
    pub n_sites: usize,
    pub realisation_index: u64,
    pub seed: u64,
    pub dim: usize,
    pub n_lls: usize,
    /// `m_c` of every LLS, in basis order.
    pub m_c: Vec<usize>,
    pub error: Option<String>,
}

pub fn mc_realisation(
    task: &Task,
    grid: &TimeGrid,
    criterion: &LlsCriterion,
    cost_tol: f64,
    options: &ScanOptions,
    max_dim: usize,
) -> McOutcome {
    let run = || -> Result<McOutcome> {
        let h = task.hamiltonian(max_dim)?;
        let opts = ScanOptions {
            sample_seed: task.sample_seed(),
            ..*options
        };
        let rows = scan_candidates(h.dim(), &opts);
        let series = sector_return_series(&h, &rows, grid, &opts.propagator)?;
        let mut m_c = Vec::new();
        for (&row, s) in rows.iter().zip(&series) {
            let state = h.basis().state(row);
            if classify_lls(state, s, criterion).qualifies {
                m_c.push(find_mc(&h, state, s, cost_tol)?.m_c);
            }
        }
        Ok(McOutcome {
            mu_over_n: task.mu_over_n,
            mu: task.params.mu,
            n_sites: task.params.n_sites,
            realisation_index: task.realisation_index,
            seed: task.seed,
            dim: h.dim(),
            n_lls: m_c.len(),
            m_c,
            error: None,
        })
    };
    run().unwrap_or_else(|e| {
        warn!(
            "realisation {} at mu/N = {} excluded: {e}",
            task.realisation_index, task.mu_over_n
        );
        McOutcome {
            mu_over_n: task.mu_over_n,
            mu: task.params.mu,
            n_sites: task.params.n_sites,
            realisation_index: task.realisation_index,
            seed: task.seed,
            dim: 0,
            n_lls: 0,
            m_c: Vec::new(),
            error: Some(e.to_string()),
        }
    })
}

pub fn mc_outcomes(
    sweep: &SweepSpec,
    grid: &TimeGrid,
    criterion: &LlsCriterion,
    cost_tol: f64,
    options: &ScanOptions,
) -> Result<Vec<McOutcome>> {
    Ok(sweep
        .tasks()?
        .par_iter()
        .map(|t| mc_realisation(t, grid, criterion, cost_tol, options, sweep.max_dim))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPoint {
    pub mu: f64,
    pub mu_over_n: f64,
    pub n_sites: usize,
    /// Realisation-weighted: mean within each realisation, then across them.
    pub mean_mc: f64,
    pub mean_mc_stderr: f64,
    pub mean_mc_over_n: f64,
    pub mean_mc_over_dh: f64,
    /// LLS-weighted mean over all LLS pooled.
    pub pooled_mean_mc: f64,
    pub n_lls_used: usize,
    /// Realisations hosting at least one LLS.
    pub realisations: usize,
    pub realisations_without_lls: usize,
    pub excluded: usize,
}

pub fn aggregate_mc(outcomes: &[McOutcome]) -> Result<Vec<McPoint>> {
    let key = |o: &McOutcome| (o.mu_over_n, o.realisation_index);
    check_unique(outcomes, key)?;
    Ok(group_by_point(outcomes, key)
        .into_values()
        .map(|group| {
            let first = group[0];
            let ok: Vec<&McOutcome> = group.iter().copied().filter(|o| o.error.is_none()).collect();
            let hosting: Vec<&McOutcome> = ok.iter().copied().filter(|o| o.n_lls > 0).collect();
            let per_real: Vec<f64> = hosting
                .iter()
                .map(|o| o.m_c.iter().sum::<usize>() as f64 / o.n_lls as f64)
                .collect();
            let per_real_dh: Vec<f64> = hosting.iter().zip(&per_real).map(|(o, m)| m / o.dim as f64).collect();
            let (mean_mc, mean_mc_stderr) = mean_stderr(&per_real);
            let (mean_mc_over_dh, _) = mean_stderr(&per_real_dh);
            let n_lls_used: usize = hosting.iter().map(|o| o.n_lls).sum();
            let pooled = hosting.iter().flat_map(|o| o.m_c.iter()).sum::<usize>() as f64 / n_lls_used as f64;
            McPoint {
                mu: first.mu,
                mu_over_n: first.mu_over_n,
                n_sites: first.n_sites,
                mean_mc,
                mean_mc_stderr,
                mean_mc_over_n: mean_mc / first.n_sites as f64,
                mean_mc_over_dh,
                pooled_mean_mc: pooled,
                n_lls_used,
                realisations: hosting.len(),
                realisations_without_lls: ok.len() - hosting.len(),
                excluded: group.len() - ok.len(),
            }
        })
        .collect())
}

pub fn mc_statistics(
    sweep: &SweepSpec,
    grid: &TimeGrid,
    criterion: &LlsCriterion,
    cost_tol: f64,
    options: &ScanOptions,
) -> Result<Vec<McPoint>> {
    aggregate_mc(&mc_outcomes(sweep, grid, criterion, cost_tol, options)?)
}

/// Per-realisation level statistics. `mean_r` is `None` when skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelOutcome {
    pub mu_over_n: f64,
    pub mu: f64,
    pub n_sites: usize,
    pub realisation_index: u64,
    pub seed: u64,
    pub dim: usize,
    pub mean_r: Option<f64>,
    pub n_collapsed: usize,
    /// Order of the spatial symmetry group; 1 when symmetries were not resolved.
    pub symmetry_order: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelOptions {
    pub dense_limit: usize,
    pub degeneracy_tol: f64,
    pub central_fraction: Option<f64>,
    /// Split the sector by the spatial symmetries of the profile first.
    pub resolve_symmetries: bool,
}

impl Default for LevelOptions {
    fn default() -> Self {
        Self {
            dense_limit: crate::spectral::DEFAULT_DENSE_LIMIT,
            degeneracy_tol: crate::spectral::DEFAULT_DEGENERACY_TOL,
            central_fraction: None,
            resolve_symmetries: true,
        }
    }
}

pub fn level_realisation(task: &Task, options: &LevelOptions, max_dim: usize) -> LevelOutcome {
    let mut out = LevelOutcome {
        mu_over_n: task.mu_over_n,
        mu: task.params.mu,
        n_sites: task.params.n_sites,
        realisation_index: task.realisation_index,
        seed: task.seed,
        dim: 0,
        mean_r: None,
        n_collapsed: 0,
        symmetry_order: 1,
        error: None,
    };
    let result = task.profile().and_then(|profile| {
        let h = SparseHamiltonian::from_profile(&profile, max_dim)?;
        out.dim = h.dim();
        if options.resolve_symmetries {
            resolved_spacing_ratios(
                &h,
                &profile,
                options.degeneracy_tol,
                options.central_fraction,
                options.dense_limit,
            )
        } else {
            let spec = diagonalize(&h, false, options.dense_limit)?;
            spacing_ratios(&spec.eigenvalues, options.degeneracy_tol, options.central_fraction).map(|s| (s, 1))
        }
    });
    match result {
        Ok((stats, order)) => {
            out.mean_r = Some(stats.mean);
            out.n_collapsed = stats.n_collapsed;
            out.symmetry_order = order;
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPoint {
    pub mu: f64,
    pub mu_over_n: f64,
    pub n_sites: usize,
    pub mean_r: f64,
    pub stderr: f64,
    pub realisations: usize,
    pub skipped: usize,
}

pub fn aggregate_levels(outcomes: &[LevelOutcome]) -> Result<Vec<LevelPoint>> {
    let key = |o: &LevelOutcome| (o.mu_over_n, o.realisation_index);
    check_unique(outcomes, key)?;
    Ok(group_by_point(outcomes, key)
        .into_values()
        .map(|group| {
            let first = group[0];
            let rs: Vec<f64> = group.iter().filter_map(|o| o.mean_r).collect();
            let (mean_r, stderr) = mean_stderr(&rs);
            LevelPoint {
                mu: first.mu,
                mu_over_n: first.mu_over_n,
                n_sites: first.n_sites,
                mean_r,
                stderr,
                realisations: rs.len(),
                skipped: group.len() - rs.len(),
            }
        })
        .collect())
}

pub fn level_outcomes(sweep: &SweepSpec, options: &LevelOptions) -> Result<Vec<LevelOutcome>> {
    Ok(sweep
        .tasks()?
        .par_iter()
        .map(|t| level_realisation(t, options, sweep.max_dim))
        .collect())
}

pub fn ensemble_level_stats(sweep: &SweepSpec, options: &LevelOptions) -> Result<Vec<LevelPoint>> {
    aggregate_levels(&level_outcomes(sweep, options)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(18.0, 0.05).unwrap()
    }

    #[test]
    fn tasks_are_value_keyed_and_reproducible() {
        let mut sweep = SweepSpec::new(10, vec![0.1, 0.3], 3, 42);
        let tasks = sweep.tasks().unwrap();
        assert_eq!(tasks.len(), 6);
        assert_eq!(tasks[0].params.mu, 1.0);
        assert_eq!(tasks[3].params.mu, 3.0);
        sweep.mu_over_n = vec![0.3];
        sweep.realisation_start = 1;
        let shifted = sweep.tasks().unwrap();
        assert_eq!(shifted[0], tasks[4]);
        sweep.n_realisations = 0;
        assert!(sweep.tasks().is_err());
    }

    #[test]
    fn single_lls_realisation_contributes_inverse_dimension() {
        let o = LlsOutcome {
            mu_over_n: 0.5,
            mu: 5.0,
            n_sites: 10,
            realisation_index: 0,
            seed: 1,
            dim: 11,
            n_scanned: 11,
            n_lls: 1,
            rho: 1.0 / 11.0,
            error: None,
        };
        let pts = aggregate_lls(std::slice::from_ref(&o)).unwrap();
        assert_eq!(pts[0].p, 1.0);
        assert_eq!(pts[0].rho_mean, 1.0 / 11.0);
        assert!(aggregate_lls(&[o.clone(), o]).is_err());
    }

    #[test]
    fn star_sector_hosts_exactly_one_lls() {
        // Ranges of at least 5 on a ring of 10 block every flip but those
        // from the root.
        let sweep = SweepSpec::new(10, vec![0.6], 4, 7);
        let pts = ensemble_statistics(&sweep, &grid(), &LlsCriterion::default(), &ScanOptions::default()).unwrap();
        assert_eq!(pts[0].realisations, 4);
        assert_eq!(pts[0].p, 1.0);
        assert!((pts[0].rho_mean - 1.0 / 11.0).abs() < 1e-12);
        assert_eq!(pts[0].mean_sector_dim, 11.0);
    }

    #[test]
    fn aggregation_is_order_independent() {
        let sweep = SweepSpec::new(10, vec![0.2, 0.4], 6, 3);
        let mut outcomes = lls_outcomes(&sweep, &grid(), &[LlsCriterion::default()], &ScanOptions::default())
            .unwrap()
            .remove(0);
        let a = aggregate_lls(&outcomes).unwrap();
        outcomes.reverse();
        outcomes.swap(1, 7);
        assert_eq!(aggregate_lls(&outcomes).unwrap(), a);
    }

    #[test]
    fn failures_are_excluded_and_counted() {
        let mut sweep = SweepSpec::new(10, vec![0.1], 2, 3);
        sweep.max_dim = 5;
        let pts = ensemble_statistics(&sweep, &grid(), &LlsCriterion::default(), &ScanOptions::default()).unwrap();
        assert_eq!(pts[0].excluded, 2);
        assert_eq!(pts[0].realisations, 0);
    }

    #[test]
    fn mc_and_levels_run() {
        let sweep = SweepSpec::new(10, vec![0.4], 4, 11);
        let mc = mc_statistics(&sweep, &grid(), &LlsCriterion::default(), 0.01, &ScanOptions::default()).unwrap();
        assert_eq!(mc.len(), 1);
        assert!(mc[0].n_lls_used > 0);
        assert!(mc[0].mean_mc >= 1.0);
        let lv = ensemble_level_stats(&SweepSpec::new(10, vec![0.1], 3, 11), &LevelOptions::default()).unwrap();
        assert_eq!(lv[0].realisations + lv[0].skipped, 3);
    }
}
