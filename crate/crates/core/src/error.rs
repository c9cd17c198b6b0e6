use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not numerically positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric: |C[{i},{j}] - C[{j},{i}]| = {gap:e}")]
    Asymmetry { i: usize, j: usize, gap: f64 },

    #[error("degenerate key: norm {0:e} is at or below 1e-8")]
    DegenerateKey(f64),

    #[error("target-value optimisation diverged at step {0}")]
    OptDiverged(usize),

    #[error("cannot rescale a zero value vector (norm {0:e})")]
    ZeroValueVector(f64),

    #[error("pilot edit {index} failed: {source}")]
    PilotFailure {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("fitted slopes coincide (s_new - s_old = {0:e})")]
    DegenerateSlopes(f64),

    #[error("regime is not physical: {0}")]
    NonPhysicalRegime(String),

    #[error("missing probes: {0}")]
    MissingProbes(String),

    #[error("edit constraint violated at step {step}: relative residual {residual:e}")]
    ConstraintViolation { step: usize, residual: f64 },

    #[error("key pool exhausted after {0} draws")]
    PoolExhausted(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("trace format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error originates from configuration (as opposed to numerics or I/O).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
