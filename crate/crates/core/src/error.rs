use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("{matrix} is not positive definite")]
    NotPositiveDefinite { matrix: String },

    #[error("degenerate weights: {positive} strictly positive weight(s), need at least 2")]
    DegenerateWeights { positive: usize },

    #[error("tail of length {len} is too short for a generalized Pareto fit (need >= 5); skip smoothing")]
    TailTooShort { len: usize },

    #[error("tail sample is constant; generalized Pareto fit is undefined")]
    DegenerateTail,

    #[error("non-finite log ratio at draw {index} (factor {factor})")]
    NonFiniteLogRatio { index: usize, factor: &'static str },

    #[error("all importance ratios are zero")]
    AllZeroRatios,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("value {value} at position {index} is outside the domain of the {transform} transform")]
    Domain {
        index: usize,
        value: f64,
        transform: &'static str,
    },

    #[error("non-finite log target at initialization in block {block}")]
    NonFiniteTarget { block: String },

    #[error("sampler adaptation diverged after {retries} retries")]
    AdaptationDiverged { retries: usize },

    #[error("simulated population is singular for J~={j_tilde}; increase the number of simulated individuals")]
    SingularSummary { j_tilde: usize },

    #[error("simulation produced non-finite values for parameter draw {draw}")]
    NonFiniteSimulation { draw: usize },

    #[error("positive-definiteness relaxation did not succeed within {max} halvings")]
    RelaxationExhausted { max: u32 },

    #[error("importance weights collapsed at step {step} (k_hat = {k_hat:?})")]
    WeightCollapse { step: usize, k_hat: Option<f64> },

    #[error("run aborted at step {step}: {source}")]
    RunAborted {
        step: usize,
        #[source]
        source: Box<Error>,
        /// Records up to the failing step.
        trace: Box<crate::orchestrator::RunTrace>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
