//! Randomly constrained spin chains.
//!
//! Each site of an `N`-site chain carries a constraint range `r_i`; its spin
//! may flip only when the `r_i` spins on either side are down. The crate
//! builds the Fock-space sector reachable from the all-down state, evolves
//! product states within it, detects long-lived states from their return
//! probability, measures the Krylov dimension their dynamics needs, and
//! collects the level statistics of the sector.

pub mod cli;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod lls;
pub mod output;
pub mod profile;
pub mod propagator;
pub mod sector;
pub mod selftest;
pub mod spectral;
pub mod symmetry;
pub mod tli;

pub use error::{Error, Result};
pub use lls::{LlsCriterion, LlsRecord, SectorScan};
pub use profile::{Boundary, ConstraintProfile, DefectSpec, EnsembleParams};
pub use propagator::{DensityProfile, Method, PropagatorConfig, ReturnSeries, TimeGrid};
pub use sector::{FockState, SectorBasis, SparseHamiltonian};
pub use spectral::{SpacingStats, SpectralData};
pub use tli::{LanczosBasis, TliResult};
