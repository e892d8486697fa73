use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("topology has a cycle through node {0}")]
    Cycle(u32),
    #[error("topology must have exactly one root, found {0}")]
    MultipleRoots(usize),
    #[error("node {child} has exit {child_exit} which is not below its parent {parent} exit {parent_exit}")]
    ExitOrderViolation {
        child: u32,
        child_exit: usize,
        parent: u32,
        parent_exit: usize,
    },
    #[error("exit {0} is not deployed on any node")]
    MissingExit(usize),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("rate fixed point did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("infeasible serving split: {0}")]
    InfeasibleSplit(String),

    #[error("total serving rate is zero")]
    ZeroTraffic,
    #[error("all adjusted exit weights are zero")]
    AllZero,
    #[error("invalid sampling parameter k = {k} for client with exit {exit}")]
    InvalidK { k: f64, exit: usize },
    #[error("exit {0} has no contributing client")]
    EmptyPool(usize),
    #[error("weights are not normalized (sum = {0})")]
    NotNormalized(f64),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("client {0} holds no samples")]
    EmptyClientDataset(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("linear system is singular")]
    SingularSystem,
    #[error("update for client {client} exit {exit} has zero sampling probability")]
    ZeroProbability { client: usize, exit: usize },
    #[error("pair (client {client}, exit {exit}) carries weight but has zero sampling probability")]
    ZeroProbabilityWithWeight { client: usize, exit: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("config error: {0}")]
    ConfigParse(String),
    #[error("missing rows for {0}")]
    MissingRows(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
