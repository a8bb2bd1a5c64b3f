//! Fock-space sector containing the fully facilitating state, and the
//! constrained-flip Hamiltonian restricted to it.
//!
//! Bit `i` of a state is 1 when spin `i` is up (blocking) and 0 when it is
//! down (facilitating). A flip of site `i` is allowed when every site within
//! distance `r_i` of `i` is down; the state of `i` itself does not matter, so
//! the allowed-flip relation is symmetric and the Hamiltonian is the adjacency
//! matrix of an undirected graph on bitmasks.

use std::collections::{HashSet, VecDeque};
use std::io::{Read, Write};
use std::ops::AddAssign;

use crate::error::{Error, Result};
use crate::profile::{Boundary, ConstraintProfile};

pub const DEFAULT_MAX_DIM: usize = 2_000_000;
pub const DEFAULT_EXHAUSTIVE_LIMIT: usize = 20;

const CACHE_MAGIC: &[u8; 8] = b"KCSECT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FockState(pub u64);

impl FockState {
    pub const FACILITATING: FockState = FockState(0);

    /// Up spins on every even site.
    pub fn neel(n_sites: usize) -> Self {
        FockState((0..n_sites).step_by(2).fold(0, |m, i| m | 1 << i))
    }

    pub fn is_up(self, site: usize) -> bool {
        self.0 >> site & 1 == 1
    }

    pub fn flip(self, site: usize) -> Self {
        FockState(self.0 ^ 1 << site)
    }

    pub fn to_bit_string(self, n_sites: usize) -> String {
        (0..n_sites).map(|i| if self.is_up(i) { '1' } else { '0' }).collect()
    }

    /// Parses a site-ordered string of '0'/'1' (site 0 first).
    pub fn from_bit_string(s: &str) -> Result<Self> {
        let mut bits = 0u64;
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' if i < 64 => bits |= 1 << i,
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "state string must contain only 0/1, got '{s}'"
                    )))
                }
            }
        }
        Ok(FockState(bits))
    }
}

/// Per-site blocking masks derived from a profile.
#[derive(Debug, Clone)]
pub struct FlipRule {
    n_sites: usize,
    masks: Vec<u64>,
}

impl FlipRule {
    pub fn new(profile: &ConstraintProfile) -> Self {
        let n = profile.n_sites;
        let masks = profile
            .ranges
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let reach = (r as usize).min(n);
                let mut mask = 0u64;
                for d in 1..=reach {
                    match profile.boundary {
                        Boundary::Periodic => {
                            for j in [(i + d) % n, (i + n - d % n) % n] {
                                if j != i {
                                    mask |= 1 << j;
                                }
                            }
                        }
                        Boundary::Open => {
                            if i + d < n {
                                mask |= 1 << (i + d);
                            }
                            if d <= i {
                                mask |= 1 << (i - d);
                            }
                        }
                    }
                }
                mask
            })
            .collect();
        Self { n_sites: n, masks }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    #[inline]
    pub fn can_flip(&self, state: FockState, site: usize) -> bool {
        state.0 & self.masks[site] == 0
    }

    pub fn allowed(&self, state: FockState) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_sites).filter(move |&i| self.can_flip(state, i))
    }
}

/// Sites whose spin may flip in `state`.
pub fn allowed_flips(state: FockState, profile: &ConstraintProfile) -> Vec<usize> {
    FlipRule::new(profile).allowed(state).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectorBasis {
    n_sites: usize,
    states: Vec<u64>,
    checksum: u64,
}

impl SectorBasis {
    /// Breadth-first closure of the fully facilitating state under allowed flips.
    pub fn build(profile: &ConstraintProfile, max_dim: usize) -> Result<Self> {
        let rule = FlipRule::new(profile);
        let mut seen: HashSet<u64> = HashSet::new();
        let mut queue = VecDeque::new();
        seen.insert(0);
        queue.push_back(FockState::FACILITATING);
        while let Some(state) = queue.pop_front() {
            for site in rule.allowed(state) {
                let next = state.flip(site);
                if seen.insert(next.0) {
                    if seen.len() > max_dim {
                        return Err(Error::SectorCapacity { capacity: max_dim });
                    }
                    queue.push_back(next);
                }
            }
        }
        let mut states: Vec<u64> = seen.into_iter().collect();
        states.sort_unstable();
        Ok(Self {
            n_sites: profile.n_sites,
            states,
            checksum: profile.checksum(),
        })
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn states(&self) -> &[u64] {
        &self.states
    }

    pub fn state(&self, index: usize) -> FockState {
        FockState(self.states[index])
    }

    pub fn index_of(&self, state: FockState) -> Option<usize> {
        self.states.binary_search(&state.0).ok()
    }

    pub fn contains(&self, state: FockState) -> bool {
        self.index_of(state).is_some()
    }

    /// Unit vector on `state` in this basis.
    pub fn basis_vector(&self, state: FockState) -> Result<Vec<f64>> {
        let idx = self.index_of(state).ok_or(Error::StateNotInSector(state.0))?;
        let mut v = vec![0.0; self.dim()];
        v[idx] = 1.0;
        Ok(v)
    }
}

/// Symmetric 0/1 adjacency matrix in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseHamiltonian {
    basis: SectorBasis,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl SparseHamiltonian {
    pub fn build(basis: SectorBasis, profile: &ConstraintProfile) -> Result<Self> {
        let found = profile.checksum();
        if found != basis.checksum || profile.n_sites != basis.n_sites {
            return Err(Error::ProfileMismatch {
                expected: basis.checksum,
                found,
            });
        }
        let rule = FlipRule::new(profile);
        let mut offsets = Vec::with_capacity(basis.dim() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for &bits in &basis.states {
            let state = FockState(bits);
            let row_start = neighbors.len();
            for site in rule.allowed(state) {
                let target = basis.index_of(state.flip(site)).ok_or(Error::ProfileMismatch {
                    expected: basis.checksum,
                    found,
                })?;
                neighbors.push(target as u32);
            }
            neighbors[row_start..].sort_unstable();
            offsets.push(neighbors.len());
        }
        Ok(Self {
            basis,
            offsets,
            neighbors,
        })
    }

    /// Builds the sector and its Hamiltonian in one go.
    pub fn from_profile(profile: &ConstraintProfile, max_dim: usize) -> Result<Self> {
        Self::build(SectorBasis::build(profile, max_dim)?, profile)
    }

    /// Wraps an explicit graph on bitmask states. The adjacency must be
    /// symmetric and free of self-loops.
    pub fn from_graph(n_sites: usize, states: Vec<u64>, adjacency: Vec<Vec<usize>>) -> Result<Self> {
        if adjacency.len() != states.len() {
            return Err(Error::DimensionMismatch {
                expected: states.len(),
                found: adjacency.len(),
            });
        }
        if !states.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidParameter("states must be strictly ascending".into()));
        }
        for (a, row) in adjacency.iter().enumerate() {
            for &b in row {
                if b == a || b >= states.len() || !adjacency[b].contains(&a) {
                    return Err(Error::InvalidParameter(format!(
                        "adjacency is not symmetric or has a self-loop at ({a}, {b})"
                    )));
                }
            }
        }
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        for mut row in adjacency {
            row.sort_unstable();
            neighbors.extend(row.into_iter().map(|b| b as u32));
            offsets.push(neighbors.len());
        }
        Ok(Self {
            basis: SectorBasis {
                n_sites,
                states,
                checksum: 0,
            },
            offsets,
            neighbors,
        })
    }

    pub fn basis(&self) -> &SectorBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn row(&self, index: usize) -> &[u32] {
        &self.neighbors[self.offsets[index]..self.offsets[index + 1]]
    }

    pub fn degree(&self, index: usize) -> usize {
        self.offsets[index + 1] - self.offsets[index]
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn apply<T>(&self, v: &[T], out: &mut [T]) -> Result<()>
    where
        T: Copy + Default + AddAssign,
    {
        let dim = self.dim();
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        if out.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: out.len(),
            });
        }
        self.apply_unchecked(v, out);
        Ok(())
    }

    #[inline]
    pub(crate) fn apply_unchecked<T>(&self, v: &[T], out: &mut [T])
    where
        T: Copy + Default + AddAssign,
    {
        for (a, slot) in out.iter_mut().enumerate() {
            let mut acc = T::default();
            for &b in self.row(a) {
                acc += v[b as usize];
            }
            *slot = acc;
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let dim = self.dim();
        let mut m = nalgebra::DMatrix::zeros(dim, dim);
        for a in 0..dim {
            for &b in self.row(a) {
                m[(a, b as usize)] = 1.0;
            }
        }
        m
    }

    /// Writes the binary sector cache: magic, `{N, D_H, checksum}`, the sorted
    /// bitmasks, then the CSR offsets and neighbour indices, all as 64-bit
    /// little-endian words.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        for word in [
            self.basis.n_sites as u64,
            self.dim() as u64,
            self.basis.checksum,
            self.neighbors.len() as u64,
        ] {
            w.write_all(&word.to_le_bytes())?;
        }
        for &s in &self.basis.states {
            w.write_all(&s.to_le_bytes())?;
        }
        for &o in &self.offsets {
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        for &n in &self.neighbors {
            w.write_all(&u64::from(n).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Cache("bad magic".into()));
        }
        let mut word = || -> Result<u64> {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            Ok(u64::from_le_bytes(buf))
        };
        let n_sites = word()? as usize;
        let dim = word()? as usize;
        let checksum = word()?;
        let nnz = word()? as usize;
        let states = (0..dim).map(|_| word()).collect::<Result<Vec<_>>>()?;
        let offsets = (0..=dim)
            .map(|_| word().map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        let neighbors = (0..nnz).map(|_| word().map(|x| x as u32)).collect::<Result<Vec<_>>>()?;
        if offsets.last() != Some(&nnz) || !states.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Cache("inconsistent arrays".into()));
        }
        Ok(Self {
            basis: SectorBasis {
                n_sites,
                states,
                checksum,
            },
            offsets,
            neighbors,
        })
    }
}

/// Disjoint-set forest with union by size and path halving.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] as usize != x {
            let grand = self.parent[self.parent[x] as usize];
            self.parent[x] = grand;
            x = grand as usize;
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra as u32;
        self.size[ra] += self.size[rb];
        true
    }

    pub fn component_size(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r] as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentSizes {
    /// Every component size, largest first.
    pub sizes: Vec<usize>,
    /// Size of the component holding the fully facilitating state.
    pub root_size: usize,
}

/// Exhaustive component census over all `2^N` bitmasks.
pub fn all_components(profile: &ConstraintProfile, limit: usize) -> Result<ComponentSizes> {
    let n = profile.n_sites;
    if n > limit {
        return Err(Error::ExhaustiveLimit { n_sites: n, limit });
    }
    let rule = FlipRule::new(profile);
    let total = 1usize << n;
    let mut uf = UnionFind::new(total);
    for s in 0..total {
        let state = FockState(s as u64);
        for site in rule.allowed(state) {
            let t = s ^ (1 << site);
            if t > s {
                uf.union(s, t);
            }
        }
    }
    let mut sizes = Vec::new();
    for s in 0..total {
        if uf.find(s) == s {
            sizes.push(uf.size[s] as usize);
        }
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let root_size = uf.component_size(0);
    Ok(ComponentSizes { sizes, root_size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{sample_constraints, EnsembleParams};
    use proptest::prelude::*;

    fn pxp(n: usize) -> ConstraintProfile {
        ConstraintProfile::pxp(n, Boundary::Periodic).unwrap()
    }

    /// Reachability by repeated sweeps over every bitmask, independent of BFS.
    fn brute_force_sector(profile: &ConstraintProfile) -> Vec<u64> {
        let n = profile.n_sites;
        let mut reached = vec![false; 1 << n];
        reached[0] = true;
        let blocked = |s: usize, i: usize| {
            let r = profile.ranges[i] as i64;
            (1..=r).any(|d| {
                [i as i64 + d, i as i64 - d].into_iter().any(|j| {
                    let j = match profile.boundary {
                        Boundary::Periodic => j.rem_euclid(n as i64) as usize,
                        Boundary::Open if j < 0 || j >= n as i64 => return false,
                        Boundary::Open => j as usize,
                    };
                    j != i && s >> j & 1 == 1
                })
            })
        };
        loop {
            let mut changed = false;
            for s in 0..1usize << n {
                if !reached[s] {
                    continue;
                }
                for i in 0..n {
                    if !blocked(s, i) && !reached[s ^ 1 << i] {
                        reached[s ^ 1 << i] = true;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        (0..1u64 << n).filter(|&s| reached[s as usize]).collect()
    }

    #[test]
    fn allowed_flip_examples() {
        let p = pxp(4);
        assert_eq!(allowed_flips(FockState(0), &p), vec![0, 1, 2, 3]);
        assert_eq!(allowed_flips(FockState(0b0001), &p), vec![0, 2]);
        let free = ConstraintProfile::uniform(6, 0, Boundary::Periodic).unwrap();
        assert_eq!(allowed_flips(FockState(0b101101), &free).len(), 6);
    }

    #[test]
    fn open_boundary_edges_are_unconstrained() {
        let p = ConstraintProfile::pxp(4, Boundary::Open).unwrap();
        // Site 3 is up: site 0 has no left neighbour, site 2 is blocked.
        assert_eq!(allowed_flips(FockState(0b1000), &p), vec![0, 1, 3]);
        // Open PXP on 4 sites: Fibonacci count F(6) = 8.
        assert_eq!(SectorBasis::build(&p, DEFAULT_MAX_DIM).unwrap().dim(), 8);
    }

    #[test]
    fn wraparound_ranges_deduplicate() {
        // r = N: every other site blocks, never the site itself.
        let p = ConstraintProfile::uniform(5, 5, Boundary::Periodic).unwrap();
        assert_eq!(allowed_flips(FockState(0b00001), &p), vec![0]);
        assert_eq!(SectorBasis::build(&p, 100).unwrap().dim(), 6);
    }

    #[test]
    fn pxp_sector_dimensions() {
        let b4 = SectorBasis::build(&pxp(4), DEFAULT_MAX_DIM).unwrap();
        assert_eq!(b4.dim(), 7);
        assert_eq!(b4.states(), brute_force_sector(&pxp(4)).as_slice());
        assert!(b4.contains(FockState(0b0101)) && b4.contains(FockState(0b1010)));
        let b6 = SectorBasis::build(&pxp(6), DEFAULT_MAX_DIM).unwrap();
        assert_eq!(b6.dim(), 18);
        assert_eq!(b6.states(), brute_force_sector(&pxp(6)).as_slice());
        // Lucas numbers for periodic PXP.
        assert_eq!(SectorBasis::build(&pxp(12), DEFAULT_MAX_DIM).unwrap().dim(), 322);
    }

    #[test]
    fn free_sector_is_hypercube() {
        for n in [2, 5, 9] {
            let p = ConstraintProfile::uniform(n, 0, Boundary::Periodic).unwrap();
            assert_eq!(SectorBasis::build(&p, DEFAULT_MAX_DIM).unwrap().dim(), 1 << n);
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let p = ConstraintProfile::uniform(12, 0, Boundary::Periodic).unwrap();
        assert!(matches!(
            SectorBasis::build(&p, 1000),
            Err(Error::SectorCapacity { capacity: 1000 })
        ));
    }

    #[test]
    fn pxp4_hamiltonian() {
        let h = SparseHamiltonian::from_profile(&pxp(4), DEFAULT_MAX_DIM).unwrap();
        assert_eq!(h.n_edges(), 8);
        assert_eq!(h.degree(h.basis().index_of(FockState(0)).unwrap()), 4);

        let v = h.basis().basis_vector(FockState(0)).unwrap();
        let mut out = vec![0.0; 7];
        h.apply(&v, &mut out).unwrap();
        for (i, &x) in out.iter().enumerate() {
            let expected = if h.basis().state(i).0.count_ones() == 1 {
                1.0
            } else {
                0.0
            };
            assert_eq!(x, expected);
        }
        h.apply(&[0.0; 7], &mut out).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
        assert!(h.apply(&[0.0; 6], &mut out).is_err());
    }

    #[test]
    fn full_range_sector_is_a_star() {
        let p = ConstraintProfile::uniform(3, 3, Boundary::Periodic).unwrap();
        let h = SparseHamiltonian::from_profile(&p, 10).unwrap();
        assert_eq!(h.dim(), 4);
        assert_eq!(h.n_edges(), 3);

        let single = SparseHamiltonian::from_graph(4, vec![0], vec![vec![]]).unwrap();
        assert_eq!(single.dim(), 1);
        assert_eq!(single.n_edges(), 0);
        let mut out = [7.0];
        single.apply(&[1.0], &mut out).unwrap();
        assert_eq!(out, [0.0]);
        assert!(SparseHamiltonian::from_graph(2, vec![0, 1], vec![vec![1], vec![]]).is_err());
    }

    #[test]
    fn mismatched_profile_is_rejected() {
        let basis = SectorBasis::build(&pxp(6), DEFAULT_MAX_DIM).unwrap();
        let other = ConstraintProfile::uniform(6, 2, Boundary::Periodic).unwrap();
        assert!(matches!(
            SparseHamiltonian::build(basis, &other),
            Err(Error::ProfileMismatch { .. })
        ));
    }

    #[test]
    fn component_census() {
        let c = all_components(&pxp(4), DEFAULT_EXHAUSTIVE_LIMIT).unwrap();
        assert_eq!(c.sizes[0], 7);
        assert_eq!(c.root_size, 7);
        assert_eq!(c.sizes.iter().sum::<usize>(), 16);

        let free = ConstraintProfile::uniform(6, 0, Boundary::Periodic).unwrap();
        assert_eq!(all_components(&free, 20).unwrap().sizes, vec![64]);

        // Full-range blockade: root star of N+1 states, everything else isolated.
        for n in [4, 7, 10] {
            let p = ConstraintProfile::uniform(n, n as u32, Boundary::Periodic).unwrap();
            let c = all_components(&p, 20).unwrap();
            assert_eq!(c.sizes[0], n + 1);
            assert_eq!(c.root_size, n + 1);
            assert_eq!(c.sizes.len(), (1 << n) - n);
            assert!(c.sizes[1..].iter().all(|&s| s == 1));
        }

        assert!(matches!(
            all_components(&pxp(21), 20),
            Err(Error::ExhaustiveLimit { .. })
        ));
    }

    #[test]
    fn cache_round_trip() {
        let p = sample_constraints(&EnsembleParams::new(10, 2.0), 3, 1).unwrap();
        let h = SparseHamiltonian::from_profile(&p, DEFAULT_MAX_DIM).unwrap();
        let mut buf = Vec::new();
        h.write_cache(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 * (1 + 4 + h.dim() + h.dim() + 1 + 2 * h.n_edges()));
        assert_eq!(SparseHamiltonian::read_cache(buf.as_slice()).unwrap(), h);
        buf[0] = b'X';
        assert!(SparseHamiltonian::read_cache(buf.as_slice()).is_err());
    }

    #[test]
    fn bit_strings() {
        let s = FockState::from_bit_string("1010").unwrap();
        assert_eq!(s, FockState::neel(4));
        assert_eq!(s.to_bit_string(4), "1010");
        assert!(FockState::from_bit_string("10a").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn sector_matches_brute_force_and_is_well_formed(
            ranges in proptest::collection::vec(0u32..5, 3..10),
            open in any::<bool>(),
        ) {
            let boundary = if open { Boundary::Open } else { Boundary::Periodic };
            let p = ConstraintProfile::from_ranges(ranges, boundary).unwrap();
            let h = SparseHamiltonian::from_profile(&p, DEFAULT_MAX_DIM).unwrap();
            let basis = h.basis();
            let brute = brute_force_sector(&p);
            prop_assert_eq!(basis.states(), brute.as_slice());
            prop_assert_eq!(basis.dim(), all_components(&p, 20).unwrap().root_size);

            let rule = FlipRule::new(&p);
            for a in 0..h.dim() {
                let sa = basis.state(a);
                // closure and row sums
                prop_assert_eq!(h.degree(a), rule.allowed(sa).count());
                for &b in h.row(a) {
                    let sb = basis.state(b as usize);
                    prop_assert_eq!((sa.0 ^ sb.0).count_ones(), 1);
                    prop_assert!(h.row(b as usize).contains(&(a as u32)));
                    prop_assert_ne!(a, b as usize);
                }
            }
        }
    }
}
