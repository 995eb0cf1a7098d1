use thiserror::Error;

/// Errors raised by the routing engine. Node indices in messages are 1-based,
/// matching the text formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("self-loop edge at node {0}")]
    SelfLoop(usize),

    #[error("graph is not strongly connected: node {to} is unreachable from node {from}")]
    NotStronglyConnected { from: usize, to: usize },

    #[error("node {node} out of range (graph has {node_count} nodes)")]
    NodeOutOfRange { node: usize, node_count: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("minute {minute} has {count} arrivals, above the maximum of {max}")]
    TooManyArrivals { minute: u32, count: usize, max: u32 },

    #[error("minute {minute} outside 1..={horizon}")]
    MinuteOutOfRange { minute: u32, horizon: u32 },

    #[error("could not draw a dropoff different from pickup node {pickup} after {attempts} attempts")]
    DegenerateTrip { pickup: usize, attempts: usize },

    #[error("infeasible control for agent {agent}: {reason}")]
    InfeasibleControl { agent: usize, reason: String },

    #[error("arrival minute {got} does not match the next minute {expected}")]
    WrongArrivalMinute { expected: u32, got: u32 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("episode aborted at minute {minute}: {source}")]
    Episode {
        minute: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss in {net} net at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { net: &'static str, epoch: usize, batch: usize },

    #[error("invalid weights file: {0}")]
    Weights(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model library is empty")]
    EmptyLibrary,

    #[error("missing weights for policy {0}")]
    MissingWeights(String),

    #[error("trace audit failed at minute {minute}: recomputed {recomputed}, recorded {recorded}")]
    AuditMismatch { minute: u32, recomputed: u64, recorded: u64 },
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse { line, message: message.into() }
    }

    pub(crate) fn infeasible(agent: usize, reason: impl Into<String>) -> Self {
        Error::InfeasibleControl { agent, reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
