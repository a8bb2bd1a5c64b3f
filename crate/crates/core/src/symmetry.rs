//! Spatial symmetries of a constraint profile, used to split a sector
//! spectrum into symmetry blocks before computing level statistics.
//!
//! A site permutation that is an isometry of the chain and preserves every
//! range maps allowed flips to allowed flips, so it permutes the sector and
//! commutes with the Hamiltonian. Levels from different blocks are
//! uncorrelated and must not be pooled into one ratio sequence.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::profile::{Boundary, ConstraintProfile};
use crate::sector::{FockState, SparseHamiltonian};
use crate::spectral::{diagonalize_dense, spacing_ratios, SpacingStats};

/// `perm[i]` is the image of site `i`.
pub type SitePermutation = Vec<usize>;

/// Chain isometries that leave the ranges unchanged, identity first.
pub fn profile_symmetries(profile: &ConstraintProfile) -> Vec<SitePermutation> {
    let n = profile.n_sites;
    let mut candidates: Vec<SitePermutation> = Vec::new();
    match profile.boundary {
        Boundary::Periodic => {
            for shift in 0..n {
                candidates.push((0..n).map(|i| (i + shift) % n).collect());
            }
            for shift in 0..n {
                candidates.push((0..n).map(|i| (shift + n - i) % n).collect());
            }
        }
        Boundary::Open => {
            candidates.push((0..n).collect());
            candidates.push((0..n).map(|i| n - 1 - i).collect());
        }
    }
    candidates
        .into_iter()
        .filter(|p| (0..n).all(|i| profile.ranges[p[i]] == profile.ranges[i]))
        .collect()
}

fn compose(a: &[usize], b: &[usize]) -> SitePermutation {
    b.iter().map(|&i| a[i]).collect()
}

fn inverse(a: &[usize]) -> SitePermutation {
    let mut inv = vec![0; a.len()];
    for (i, &j) in a.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Conjugacy classes as index lists into `group`.
pub fn conjugacy_classes(group: &[SitePermutation]) -> Vec<Vec<usize>> {
    let mut class_of = vec![usize::MAX; group.len()];
    let mut classes = Vec::new();
    for g in 0..group.len() {
        if class_of[g] != usize::MAX {
            continue;
        }
        let id = classes.len();
        let mut members = Vec::new();
        for h in group {
            let c = compose(&compose(h, &group[g]), &inverse(h));
            let k = group.iter().position(|x| *x == c).expect("group is closed");
            if class_of[k] == usize::MAX {
                class_of[k] = id;
                members.push(k);
            }
        }
        members.sort_unstable();
        classes.push(members);
    }
    classes
}

pub fn permute_state(state: FockState, perm: &[usize]) -> FockState {
    let mut out = 0u64;
    let mut bits = state.0;
    while bits != 0 {
        let i = bits.trailing_zeros() as usize;
        out |= 1 << perm[i];
        bits &= bits - 1;
    }
    FockState(out)
}

/// Eigenvalues of each symmetry block of the sector.
///
/// Blocks are the eigenspaces of a generic combination of class sums, which
/// are the isotypic components of the symmetry group. Inside a component of a
/// two-dimensional irrep every level appears twice.
pub fn symmetry_block_spectra(
    h: &SparseHamiltonian,
    profile: &ConstraintProfile,
    dense_limit: usize,
) -> Result<Vec<Vec<f64>>> {
    let dim = h.dim();
    if dim > dense_limit {
        return Err(Error::DenseLimit {
            dim,
            limit: dense_limit,
        });
    }
    let group = profile_symmetries(profile);
    if group.len() == 1 {
        return Ok(vec![diagonalize_dense(h.to_dense(), false).eigenvalues]);
    }
    let basis = h.basis();
    let images: Vec<Vec<usize>> = group
        .iter()
        .map(|g| {
            (0..dim)
                .map(|a| {
                    let s = permute_state(basis.state(a), g);
                    basis.index_of(s).ok_or(Error::StateNotInSector(s.0))
                })
                .collect::<Result<Vec<usize>>>()
        })
        .collect::<Result<_>>()?;
    let mut z = DMatrix::zeros(dim, dim);
    for (j, class) in conjugacy_classes(&group).iter().enumerate() {
        let weight = 1.0 + ((j + 1) as f64 * 0.618_033_988_749_894_9).fract();
        for &g in class {
            for (a, &b) in images[g].iter().enumerate() {
                z[(b, a)] += weight;
            }
        }
    }
    let eig = diagonalize_dense(z, true);
    let vectors = eig.eigenvectors.expect("vectors kept");
    let dense = h.to_dense();
    let mut blocks = Vec::new();
    let mut start = 0;
    for k in 1..=dim {
        let split = k == dim || eig.eigenvalues[k] - eig.eigenvalues[k - 1] > 1e-6 * (1.0 + eig.eigenvalues[k].abs());
        if split {
            let q = vectors.columns(start, k - start);
            let block = q.transpose() * &dense * q;
            blocks.push(diagonalize_dense(block, false).eigenvalues);
            start = k;
        }
    }
    Ok(blocks)
}

/// Spacing ratios pooled over symmetry blocks, with the group order.
/// Blocks with fewer than three distinct levels contribute nothing.
pub fn resolved_spacing_ratios(
    h: &SparseHamiltonian,
    profile: &ConstraintProfile,
    degeneracy_tol: f64,
    central_fraction: Option<f64>,
    dense_limit: usize,
) -> Result<(SpacingStats, usize)> {
    let order = profile_symmetries(profile).len();
    let mut ratios = Vec::new();
    let mut n_levels_used = 0;
    let mut n_collapsed = 0;
    for block in symmetry_block_spectra(h, profile, dense_limit)? {
        match spacing_ratios(&block, degeneracy_tol, central_fraction) {
            Ok(s) => {
                ratios.extend(s.ratios);
                n_levels_used += s.n_levels_used;
                n_collapsed += s.n_collapsed;
            }
            Err(Error::TooFewLevels(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if ratios.is_empty() {
        return Err(Error::TooFewLevels(n_levels_used));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok((
        SpacingStats {
            ratios,
            mean,
            n_levels_used,
            n_collapsed,
            degeneracy_tol,
        },
        order,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{sample_constraints, DefectSpec, EnsembleParams};
    use crate::sector::DEFAULT_MAX_DIM;
    use crate::spectral::diagonalize;

    fn sector(p: &ConstraintProfile) -> SparseHamiltonian {
        SparseHamiltonian::from_profile(p, DEFAULT_MAX_DIM).unwrap()
    }

    #[test]
    fn group_orders() {
        let pxp = ConstraintProfile::pxp(10, Boundary::Periodic).unwrap();
        assert_eq!(profile_symmetries(&pxp).len(), 20);
        // D_10 has (10 + 6) / 2 = 8 classes.
        assert_eq!(conjugacy_classes(&profile_symmetries(&pxp)).len(), 8);
        let defect = pxp.apply_defect(&DefectSpec::new(3, 2).unwrap()).unwrap();
        assert_eq!(profile_symmetries(&defect).len(), 2);
        let open = ConstraintProfile::from_ranges(vec![1, 2, 3, 1], Boundary::Open).unwrap();
        assert_eq!(profile_symmetries(&open).len(), 1);
        let open = ConstraintProfile::from_ranges(vec![1, 2, 2, 1], Boundary::Open).unwrap();
        assert_eq!(profile_symmetries(&open).len(), 2);
    }

    #[test]
    fn symmetries_preserve_the_sector_graph() {
        let pxp = ConstraintProfile::pxp(8, Boundary::Periodic).unwrap();
        let h = sector(&pxp);
        for g in profile_symmetries(&pxp) {
            for a in 0..h.dim() {
                let ga = h.basis().index_of(permute_state(h.basis().state(a), &g)).unwrap();
                let mut mapped: Vec<usize> = h
                    .row(a)
                    .iter()
                    .map(|&b| {
                        h.basis()
                            .index_of(permute_state(h.basis().state(b as usize), &g))
                            .unwrap()
                    })
                    .collect();
                mapped.sort_unstable();
                let mut direct: Vec<usize> = h.row(ga).iter().map(|&b| b as usize).collect();
                direct.sort_unstable();
                assert_eq!(mapped, direct);
            }
        }
    }

    #[test]
    fn blocks_partition_the_spectrum() {
        let mut profiles = vec![
            ConstraintProfile::pxp(10, Boundary::Periodic).unwrap(),
            ConstraintProfile::pxp(12, Boundary::Periodic)
                .unwrap()
                .apply_defect(&DefectSpec::new(6, 2).unwrap())
                .unwrap(),
            ConstraintProfile::from_ranges(vec![1, 2, 1, 1, 2, 1, 1, 2, 1, 1, 2, 1], Boundary::Periodic).unwrap(),
            ConstraintProfile::pxp(9, Boundary::Open).unwrap(),
        ];
        profiles.push(sample_constraints(&EnsembleParams::new(12, 2.0), 4, 1).unwrap());
        for p in &profiles {
            let h = sector(p);
            let blocks = symmetry_block_spectra(&h, p, 4096).unwrap();
            let order = profile_symmetries(p).len();
            assert!(blocks.len() <= order.max(1));
            assert_eq!(blocks.len() > 1, order > 1);
            let mut joined: Vec<f64> = blocks.concat();
            joined.sort_by(f64::total_cmp);
            let full = diagonalize(&h, false, 4096).unwrap().eigenvalues;
            assert_eq!(joined.len(), full.len());
            for (a, b) in joined.iter().zip(&full) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pxp_momentum_blocks() {
        // Translation-invariant chain: at least one block per momentum pair.
        let p = ConstraintProfile::pxp(10, Boundary::Periodic).unwrap();
        let blocks = symmetry_block_spectra(&sector(&p), &p, 4096).unwrap();
        assert!(blocks.len() >= 6);
        // The block holding the all-down state is invariant under every symmetry.
        assert!(blocks.iter().all(|b| !b.is_empty()));
    }

    #[test]
    fn resolving_symmetries_restores_level_repulsion() {
        let p = ConstraintProfile::pxp(14, Boundary::Periodic).unwrap();
        let h = sector(&p);
        let mixed = spacing_ratios(&diagonalize(&h, false, 4096).unwrap().eigenvalues, 1e-8, None)
            .unwrap()
            .mean;
        let (resolved, order) = resolved_spacing_ratios(&h, &p, 1e-8, None, 4096).unwrap();
        assert_eq!(order, 28);
        assert!(resolved.mean > mixed + 0.05, "{} vs {mixed}", resolved.mean);
    }
}
