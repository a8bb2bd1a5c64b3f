use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("site index {site} out of range for a chain of {n_sites} sites")]
    SiteOutOfRange { site: usize, n_sites: usize },

    #[error("sector dimension exceeds capacity of {capacity} states")]
    SectorCapacity { capacity: usize },

    #[error("exhaustive component search refused: N = {n_sites} exceeds limit {limit}")]
    ExhaustiveLimit { n_sites: usize, limit: usize },

    #[error("profile checksum {found:#018x} does not match sector checksum {expected:#018x}")]
    ProfileMismatch { expected: u64, found: u64 },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("sector dimension {dim} exceeds dense limit {limit}")]
    DenseLimit { dim: usize, limit: usize },

    #[error("initial state is not normalized (norm = {0})")]
    Unnormalized(f64),

    #[error("state {0:#b} is not in the sector")]
    StateNotInSector(u64),

    #[error("Krylov propagator failed to converge within {substeps} substeps at t = {time}")]
    KrylovConvergence { time: f64, substeps: usize },

    #[error("eigenvectors were not retained")]
    MissingEigenvectors,

    #[error("too few distinct levels ({0}) for spacing ratios")]
    TooFewLevels(usize),

    #[error("time grids differ")]
    GridMismatch,

    #[error("propagation failed for state {state:#b}: {source}")]
    Propagation {
        state: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed sector cache: {0}")]
    Cache(String),

    #[error("incompatible partial results: {0}")]
    Merge(String),

    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
