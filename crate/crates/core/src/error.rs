use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("LCP matrix is not monotone (smallest eigenvalue of M + Mᵀ is {0:.3e})")]
    NonMonotone(f64),

    #[error("{solver} did not converge in {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("no feasible active set found by enumeration")]
    NoSolution,

    #[error("two feasible active sets yield different solutions (input is not monotone)")]
    AmbiguousSolution,

    #[error("enumeration is limited to {max} complementarity variables, got {got}")]
    TooLarge { max: usize, got: usize },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid LCS parameters: {0}")]
    InvalidParams(String),

    #[error("no admissible draw after {attempts} attempts")]
    GenerationExhausted { attempts: usize },

    #[error("state norm {norm:.3e} exceeded the explosion guard at step {step}")]
    StateExplosion { step: usize, norm: f64 },

    #[error("step {index}: {source}")]
    AtStep {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("buffer holds {0} input vectors, need at least 2")]
    DegenerateBuffer(usize),

    #[error("baseline cost {0} is not positive")]
    DegenerateBaseline(f64),

    #[error("training aborted: {skipped} of {total} datapoints failed in one epoch")]
    TrainingAborted { skipped: usize, total: usize },

    #[error("iteration {iteration}: {failed} of {attempted} rollouts failed")]
    IterationFailed {
        iteration: usize,
        failed: usize,
        attempted: usize,
    },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("schema mismatch in {path}: expected {expected}, found {found}")]
    Schema {
        path: String,
        expected: String,
        found: String,
    },

    #[error("only {succeeded} of {total} trials succeeded")]
    PartialAggregation { succeeded: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at_step(index: usize, source: Error) -> Self {
        Error::AtStep {
            index,
            source: Box::new(source),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parse { .. } | Error::Schema { .. } => 2,
            Error::PartialAggregation { .. } => 4,
            Error::Io(_) => 2,
            _ => 3,
        }
    }
}
