//! Constraint-range realisations.
//!
//! Every site `i` carries a range `r_i`: the spin there may flip only when the
//! `r_i` sites on either side are all in the facilitating (down) state. Ranges
//! are drawn independently and uniformly from `[round(mu) - eps, round(mu) + eps]`
//! and clamped from below at `min_range`.
//!
//! Draws come from a ChaCha stream selected by `(seed, realisation_index)` and
//! positioned by site, so any single realisation can be rebuilt without
//! replaying the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Bitmask states are stored in a `u64`; keep one bit of headroom.
pub const MAX_SITES: usize = 63;

/// Words of the ChaCha stream reserved for each site's draw.
const WORDS_PER_SITE: u128 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Periodic,
    Open,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodic" => Ok(Boundary::Periodic),
            "open" => Ok(Boundary::Open),
            other => Err(Error::InvalidParameter(format!(
                "boundary must be 'periodic' or 'open', got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Boundary::Periodic => "periodic",
            Boundary::Open => "open",
        })
    }
}

/// Parameters of the range distribution shared by all realisations of a sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub n_sites: usize,
    pub mu: f64,
    pub epsilon: u32,
    pub min_range: u32,
    pub boundary: Boundary,
}

impl EnsembleParams {
    pub fn new(n_sites: usize, mu: f64) -> Self {
        Self {
            n_sites,
            mu,
            epsilon: 1,
            min_range: 1,
            boundary: Boundary::Periodic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites < 2 || self.n_sites > MAX_SITES {
            return Err(Error::InvalidParameter(format!(
                "n_sites must lie in [2, {MAX_SITES}], got {}",
                self.n_sites
            )));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mu must be finite and non-negative, got {}",
                self.mu
            )));
        }
        Ok(())
    }

    /// Inclusive support of the raw (unclamped) draw.
    pub fn draw_support(&self) -> (i64, i64) {
        let centre = self.mu.round() as i64;
        let eps = i64::from(self.epsilon);
        (centre - eps, centre + eps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintProfile {
    pub n_sites: usize,
    pub ranges: Vec<u32>,
    pub mu: f64,
    pub epsilon: u32,
    pub min_range: u32,
    pub boundary: Boundary,
    pub seed: u64,
    pub realisation_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub site: usize,
    pub strength: u32,
}

impl DefectSpec {
    pub fn new(site: usize, strength: u32) -> Result<Self> {
        if strength == 0 {
            return Err(Error::InvalidParameter("defect strength must be at least 1".into()));
        }
        Ok(Self { site, strength })
    }
}

/// Draws one realisation of the constraint ranges.
pub fn sample_constraints(params: &EnsembleParams, seed: u64, realisation_index: u64) -> Result<ConstraintProfile> {
    params.validate()?;
    let (lo, hi) = params.draw_support();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(realisation_index);
    let ranges = (0..params.n_sites)
        .map(|site| {
            rng.set_word_pos(site as u128 * WORDS_PER_SITE);
            let raw = rng.random_range(lo..=hi);
            raw.max(i64::from(params.min_range)) as u32
        })
        .collect();
    Ok(ConstraintProfile {
        n_sites: params.n_sites,
        ranges,
        mu: params.mu,
        epsilon: params.epsilon,
        min_range: params.min_range,
        boundary: params.boundary,
        seed,
        realisation_index,
    })
}

impl ConstraintProfile {
    /// Nearest-neighbour blockade on every site.
    pub fn pxp(n_sites: usize, boundary: Boundary) -> Result<Self> {
        Self::uniform(n_sites, 1, boundary)
    }

    /// Every site carries the same range. `range = 0` gives free spins.
    pub fn uniform(n_sites: usize, range: u32, boundary: Boundary) -> Result<Self> {
        let params = EnsembleParams {
            n_sites,
            mu: f64::from(range),
            epsilon: 0,
            min_range: range.min(1),
            boundary,
        };
        params.validate()?;
        Ok(Self {
            n_sites,
            ranges: vec![range; n_sites],
            mu: f64::from(range),
            epsilon: 0,
            min_range: params.min_range,
            boundary,
            seed: 0,
            realisation_index: 0,
        })
    }

    /// Explicit ranges, e.g. for hand-built test chains.
    pub fn from_ranges(ranges: Vec<u32>, boundary: Boundary) -> Result<Self> {
        let n_sites = ranges.len();
        if !(2..=MAX_SITES).contains(&n_sites) {
            return Err(Error::InvalidParameter(format!(
                "n_sites must lie in [2, {MAX_SITES}], got {n_sites}"
            )));
        }
        let mean = ranges.iter().map(|&r| f64::from(r)).sum::<f64>() / n_sites as f64;
        let min_range = ranges.iter().copied().min().unwrap_or(0);
        Ok(Self {
            n_sites,
            ranges,
            mu: mean,
            epsilon: 0,
            min_range,
            boundary,
            seed: 0,
            realisation_index: 0,
        })
    }

    pub fn apply_defect(&self, defect: &DefectSpec) -> Result<Self> {
        if defect.site >= self.n_sites {
            return Err(Error::SiteOutOfRange {
                site: defect.site,
                n_sites: self.n_sites,
            });
        }
        let mut out = self.clone();
        out.ranges[defect.site] = defect.strength;
        Ok(out)
    }

    /// Hash over everything that shapes the sector graph.
    pub fn checksum(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update((self.n_sites as u64).to_le_bytes());
        hasher.update([match self.boundary {
            Boundary::Periodic => 0u8,
            Boundary::Open => 1u8,
        }]);
        for r in &self.ranges {
            hasher.update(r.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(word)
    }
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one point of a μ/N sweep. Keyed on the value rather than its
/// position in the grid so that split runs over different grids agree.
pub fn point_seed(master: u64, mu_over_n: f64) -> u64 {
    mix64(master ^ mix64(canonical_mu_over_n(mu_over_n).to_bits()))
}

/// Rounds grid values to 1e-9 so that `0.05 + 2 * 0.025` and `0.1` coincide.
pub fn canonical_mu_over_n(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}
