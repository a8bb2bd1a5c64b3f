//! Long-lived state detection.
//!
//! A Fock state is long-lived when its return probability climbs back above
//! a threshold at least `min_crossings` times within the time window.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagator::{evolve_krylov_with, fock_vector, PropagatorConfig, ReturnSeries, SpectralReturns, TimeGrid};
use crate::sector::{FockState, SparseHamiltonian};
use crate::spectral::diagonalize;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_CROSSINGS: usize = 3;
pub const DEFAULT_CANDIDATE_CAP: usize = 50_000;

/// Stream id for candidate subsampling, kept apart from the range draws.
const SAMPLING_STREAM: u64 = 0x5ca1_ab1e;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlsCriterion {
    pub threshold: f64,
    pub min_crossings: usize,
}

impl Default for LlsCriterion {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            min_crossings: DEFAULT_MIN_CROSSINGS,
        }
    }
}

impl LlsCriterion {
    pub fn new(threshold: f64, min_crossings: usize) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "threshold must lie in (0, 1), got {threshold}"
            )));
        }
        if min_crossings == 0 {
            return Err(Error::InvalidParameter("min_crossings must be at least 1".into()));
        }
        Ok(Self {
            threshold,
            min_crossings,
        })
    }
}

/// Upward crossings: samples at or above `threshold` whose predecessor lies
/// strictly below it.
pub fn count_threshold_crossings(values: &[f64], threshold: f64) -> usize {
    values
        .windows(2)
        .filter(|w| w[0] < threshold && w[1] >= threshold)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LlsRecord {
    pub state: u64,
    pub crossings: usize,
    pub qualifies: bool,
}

pub fn classify_lls(state: FockState, series: &ReturnSeries, criterion: &LlsCriterion) -> LlsRecord {
    let crossings = count_threshold_crossings(&series.values, criterion.threshold);
    LlsRecord {
        state: state.0,
        crossings,
        qualifies: crossings >= criterion.min_crossings,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub candidate_cap: usize,
    /// Seeds the candidate subsample when the sector exceeds the cap.
    pub sample_seed: u64,
    pub propagator: PropagatorConfig,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            candidate_cap: DEFAULT_CANDIDATE_CAP,
            sample_seed: 0,
            propagator: PropagatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectorScan {
    pub records: Vec<LlsRecord>,
    pub dim: usize,
    /// Number of states evolved; equals `dim` unless subsampled.
    pub n_scanned: usize,
    pub sampled: bool,
    /// LLS among the scanned states.
    pub n_lls: usize,
    /// Fraction of sector states that are LLS (a sample estimate when subsampled).
    pub rho: f64,
}

impl SectorScan {
    /// Estimated LLS count in the full sector.
    pub fn n_lls_estimate(&self) -> f64 {
        self.rho * self.dim as f64
    }
}

/// Candidate rows: the whole basis, or a uniform sample without replacement.
pub fn scan_candidates(dim: usize, options: &ScanOptions) -> Vec<usize> {
    if dim <= options.candidate_cap {
        return (0..dim).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.sample_seed);
    rng.set_stream(SAMPLING_STREAM);
    let mut rows = index::sample(&mut rng, dim, options.candidate_cap).into_vec();
    rows.sort_unstable();
    rows
}

/// Return-probability series for the given rows, using the spectral route
/// inside the dense limit and per-state Krylov evolution beyond it.
pub fn sector_return_series(
    h: &SparseHamiltonian,
    rows: &[usize],
    grid: &TimeGrid,
    cfg: &PropagatorConfig,
) -> Result<Vec<ReturnSeries>> {
    if h.dim() <= cfg.dense_limit {
        let spec = diagonalize(h, true, cfg.dense_limit)?;
        return Ok(SpectralReturns::new(&spec, grid)?.series(rows));
    }
    rows.par_iter()
        .map(|&row| {
            let state = h.basis().state(row);
            let psi0 = fock_vector(h, state)?;
            let mut values = Vec::with_capacity(grid.len());
            evolve_krylov_with(h, &psi0, grid, cfg, |_, psi| {
                values.push(psi[row].norm_sqr().min(1.0));
                Ok(())
            })
            .map_err(|e| Error::Propagation {
                state: state.0,
                source: Box::new(e),
            })?;
            values[0] = 1.0;
            Ok(ReturnSeries { grid: *grid, values })
        })
        .collect()
}

/// Classifies every candidate state once per criterion. The expensive
/// evolution is shared across criteria.
pub fn scan_sector_multi(
    h: &SparseHamiltonian,
    grid: &TimeGrid,
    criteria: &[LlsCriterion],
    options: &ScanOptions,
) -> Result<Vec<SectorScan>> {
    let dim = h.dim();
    if dim == 0 {
        return Err(Error::InvalidParameter("empty sector".into()));
    }
    let rows = scan_candidates(dim, options);
    let series = sector_return_series(h, &rows, grid, &options.propagator)?;
    Ok(criteria
        .iter()
        .map(|criterion| {
            let records: Vec<LlsRecord> = rows
                .iter()
                .zip(&series)
                .map(|(&row, s)| classify_lls(h.basis().state(row), s, criterion))
                .collect();
            let n_lls = records.iter().filter(|r| r.qualifies).count();
            SectorScan {
                dim,
                n_scanned: rows.len(),
                sampled: rows.len() < dim,
                n_lls,
                rho: n_lls as f64 / rows.len() as f64,
                records,
            }
        })
        .collect())
}

pub fn scan_sector(
    h: &SparseHamiltonian,
    grid: &TimeGrid,
    criterion: &LlsCriterion,
    options: &ScanOptions,
) -> Result<SectorScan> {
    Ok(scan_sector_multi(h, grid, std::slice::from_ref(criterion), options)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{Boundary, ConstraintProfile, DefectSpec};
    use crate::propagator::{return_probability, Method};
    use crate::sector::DEFAULT_MAX_DIM;
    use proptest::prelude::*;

    fn series(values: Vec<f64>) -> ReturnSeries {
        ReturnSeries {
            grid: TimeGrid::new((values.len() - 1) as f64, 1.0).unwrap(),
            values,
        }
    }

    #[test]
    fn crossing_counts() {
        let decay: Vec<f64> = (0..=100).map(|k| 1.0 - k as f64 / 100.0).collect();
        assert_eq!(count_threshold_crossings(&decay, 0.5), 0);
        assert_eq!(count_threshold_crossings(&[1.0; 50], 0.5), 0);
        let grid = TimeGrid::new(4.0 * std::f64::consts::PI, 0.01).unwrap();
        let cos4: Vec<f64> = grid.times().map(|t| t.cos().powi(4)).collect();
        assert_eq!(count_threshold_crossings(&cos4, 0.5), 4);
        // touching the threshold from below counts
        assert_eq!(count_threshold_crossings(&[1.0, 0.2, 0.5, 0.1, 0.6], 0.5), 2);
    }

    #[test]
    fn criterion_validation() {
        assert!(LlsCriterion::new(0.0, 3).is_err());
        assert!(LlsCriterion::new(1.0, 3).is_err());
        assert!(LlsCriterion::new(0.5, 0).is_err());
        assert_eq!(LlsCriterion::default(), LlsCriterion::new(0.5, 3).unwrap());
    }

    #[test]
    fn single_record_semantics() {
        let c = LlsCriterion::default();
        let r = classify_lls(FockState(5), &series(vec![1.0, 0.1, 0.9, 0.1, 0.9, 0.2, 0.7]), &c);
        assert_eq!(r.crossings, 3);
        assert!(r.qualifies);
        let r = classify_lls(FockState(5), &series(vec![1.0, 0.1, 0.9, 0.1, 0.9]), &c);
        assert!(!r.qualifies);
    }

    #[test]
    fn pxp_z2_is_long_lived_and_defect_kills_it() {
        let grid = TimeGrid::new(18.0, 0.05).unwrap();
        let cfg = PropagatorConfig::default();
        let pxp = ConstraintProfile::pxp(12, Boundary::Periodic).unwrap();
        let h = SparseHamiltonian::from_profile(&pxp, DEFAULT_MAX_DIM).unwrap();
        let z2 = FockState::neel(12);
        let s = return_probability(&h, z2, &grid, Method::Auto, &cfg).unwrap();
        assert!(classify_lls(z2, &s, &LlsCriterion::default()).qualifies);

        let scan = scan_sector(&h, &grid, &LlsCriterion::default(), &ScanOptions::default()).unwrap();
        let lls: Vec<u64> = scan.records.iter().filter(|r| r.qualifies).map(|r| r.state).collect();
        assert!(lls.contains(&z2.0) && lls.contains(&(z2.0 << 1)));

        let defected = pxp.apply_defect(&DefectSpec::new(6, 2).unwrap()).unwrap();
        let h = SparseHamiltonian::from_profile(&defected, DEFAULT_MAX_DIM).unwrap();
        let s = return_probability(&h, z2, &grid, Method::Auto, &cfg).unwrap();
        assert!(!classify_lls(z2, &s, &LlsCriterion::default()).qualifies);
    }

    #[test]
    fn free_model_every_state_revives() {
        let p = ConstraintProfile::uniform(4, 0, Boundary::Periodic).unwrap();
        let h = SparseHamiltonian::from_profile(&p, DEFAULT_MAX_DIM).unwrap();
        let grid = TimeGrid::new(18.0, 0.05).unwrap();
        let scan = scan_sector(&h, &grid, &LlsCriterion::default(), &ScanOptions::default()).unwrap();
        assert_eq!(scan.n_lls, 16);
        assert_eq!(scan.rho, 1.0);
    }

    #[test]
    fn trivial_sector_has_no_lls() {
        let h = SparseHamiltonian::from_graph(3, vec![0], vec![vec![]]).unwrap();
        let grid = TimeGrid::new(18.0, 0.05).unwrap();
        let scan = scan_sector(&h, &grid, &LlsCriterion::default(), &ScanOptions::default()).unwrap();
        assert_eq!(scan.n_lls, 0);
        assert_eq!(scan.rho, 0.0);
    }

    #[test]
    fn sampling_covers_whole_basis_when_cap_allows() {
        let p = ConstraintProfile::pxp(10, Boundary::Periodic).unwrap();
        let h = SparseHamiltonian::from_profile(&p, DEFAULT_MAX_DIM).unwrap();
        let grid = TimeGrid::new(18.0, 0.05).unwrap();
        let full = scan_sector(&h, &grid, &LlsCriterion::default(), &ScanOptions::default()).unwrap();
        let capped = ScanOptions {
            candidate_cap: h.dim(),
            ..ScanOptions::default()
        };
        assert_eq!(scan_sector(&h, &grid, &LlsCriterion::default(), &capped).unwrap(), full);

        let small = ScanOptions {
            candidate_cap: 40,
            sample_seed: 9,
            ..ScanOptions::default()
        };
        let rows = scan_candidates(h.dim(), &small);
        assert_eq!(rows.len(), 40);
        assert!(rows.windows(2).all(|w| w[0] < w[1]));
        let sampled = scan_sector(&h, &grid, &LlsCriterion::default(), &small).unwrap();
        assert!(sampled.sampled);
        assert_eq!(sampled.n_scanned, 40);
        // subsampled records agree with the exhaustive ones
        for r in &sampled.records {
            assert!(full.records.contains(r));
        }
    }

    #[test]
    fn krylov_scan_matches_spectral_scan() {
        let p = ConstraintProfile::pxp(8, Boundary::Periodic).unwrap();
        let h = SparseHamiltonian::from_profile(&p, DEFAULT_MAX_DIM).unwrap();
        let grid = TimeGrid::new(18.0, 0.05).unwrap();
        let exact = scan_sector(&h, &grid, &LlsCriterion::default(), &ScanOptions::default()).unwrap();
        let krylov_opts = ScanOptions {
            propagator: PropagatorConfig {
                dense_limit: 1,
                ..PropagatorConfig::default()
            },
            ..ScanOptions::default()
        };
        let krylov = scan_sector(&h, &grid, &LlsCriterion::default(), &krylov_opts).unwrap();
        assert_eq!(exact.n_lls, krylov.n_lls);
    }

    #[test]
    fn shallow_dips_break_threshold_monotonicity() {
        // An oscillation between 0.4 and 0.6 crosses 0.5 but never 0.3.
        let v = [1.0, 0.4, 0.6, 0.4, 0.6];
        assert_eq!(count_threshold_crossings(&v, 0.3), 0);
        assert_eq!(count_threshold_crossings(&v, 0.5), 2);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_crossings_without_shallow_dips(
            picks in proptest::collection::vec((any::<bool>(), 0.0f64..1.0), 2..200),
            lo in 0.05f64..0.9,
            delta in 0.0f64..0.5,
        ) {
            let hi = (lo + delta).min(0.99);
            // Every sample lies below `lo` or at/above `hi`, so each dip under
            // `hi` also passes under `lo`.
            let mut v = vec![1.0];
            v.extend(picks.iter().map(|&(up, u)| if up { hi + u * (1.0 - hi) } else { u * lo * 0.999 }));
            prop_assert!(count_threshold_crossings(&v, hi) <= count_threshold_crossings(&v, lo));
        }
    }
}
