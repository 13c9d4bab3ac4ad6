use thiserror::Error;

use crate::graph::Edge;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vertex {0} is out of range for a graph with {1} agents")]
    VertexOutOfRange(usize, usize),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("vertices must differ, got {0} twice")]
    EqualVertices(usize),
    #[error("vertex {0} is not a leader")]
    NotALeader(usize),
    #[error("edge {0} is not a follower-follower edge")]
    NotFollowerEdge(Edge),
    #[error("follower-follower edge {0} has no distinct leader pair (leader assumption violated)")]
    NoDistinctLeaders(Edge),
    #[error("leader separation {separation} is not above eps = {eps}")]
    DegenerateDirection { separation: f64, eps: f64 },
    #[error("operation expects a {expected} candidate")]
    WrongVariant { expected: &'static str },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("not enough samples: need {needed}, have {have}")]
    NotEnoughSamples { needed: usize, have: usize },
    #[error("no sample satisfies the leader segment separation constraint")]
    NoAdmissibleSample,
    #[error("bound LP is infeasible: {0}")]
    InfeasibleBounds(String),
    #[error("QP solve failed: {0}")]
    Solver(String),
    #[error("closed loop aborted at t = {time}: {reason}")]
    SimulationAborted { time: f64, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
