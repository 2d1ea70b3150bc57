use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one user")]
    Empty,
    #[error("threshold distance must be positive and finite, got {0}")]
    BadThreshold(f64),
    #[error("user id {id} out of range for {num_users} users")]
    InvalidUser { id: usize, num_users: usize },
    #[error("self-loop on user {0}")]
    SelfLoop(usize),
    #[error("position ({x}, {y}) outside the unit square")]
    PositionOutOfRange { x: f64, y: f64 },
    #[error("graph file: {0}")]
    Format(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl ParamError {
    pub(crate) fn new(field: &'static str, reason: impl Into<String>) -> Self {
        ParamError::Invalid {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("singular threshold system at pivot column {column} (threshold {threshold})")]
    Singular { column: usize, threshold: u32 },
    #[error("threshold {threshold} exceeds buffer cap {buffer_cap}")]
    ThresholdOutOfRange { threshold: u32, buffer_cap: u32 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("user {user}, state {state}, sweep {sweep}: {source}")]
    Solve {
        user: usize,
        state: u32,
        sweep: usize,
        #[source]
        source: SolveError,
    },
    #[error("index update needs a nonempty queue (user {user})")]
    EmptyQueue { user: usize },
    #[error("lambda snapshot has {got} entries, expected {expected}")]
    Snapshot { got: usize, expected: usize },
    #[error("n_iter must be at least 1")]
    NoIterations,
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("exact set selection limited to {cap} users, graph has {num_users}")]
    TooLargeForExact { num_users: usize, cap: usize },
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("theta must be nonnegative, got {0}")]
    BadTheta(f64),
    #[error("no external decision provider registered as {0:?}")]
    UnknownExternal(String),
    #[error("external provider returned an invalid decision: {0}")]
    InvalidExternal(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("slot {slot}: {source}")]
    Index {
        slot: u64,
        #[source]
        source: IndexError,
    },
    #[error("index precomputation: {0}")]
    Precompute(#[source] IndexError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("scenario: {0}")]
    Scenario(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
