use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate ({lat_deg}, {lon_deg})")]
    InvalidGeoPoint { lat_deg: f64, lon_deg: f64 },

    #[error("no reference sites configured")]
    NoSites,

    #[error("projection invalid: point is {distance_m:.0} m from the origin")]
    ProjectionRange { distance_m: f64 },

    #[error("native rate {rate_hz} Hz is below the 4 Hz alignment grid")]
    InsufficientRate { rate_hz: f64 },

    #[error("fusion problem needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),

    #[error("episode {0} is missing sensor data required for this stage")]
    MissingSensor(String),

    #[error("location generation failed for seed {seed} after {attempts} attempts")]
    Generation { seed: u64, attempts: usize },

    #[error("goal node {to} unreachable from {from}")]
    Unreachable { from: usize, to: usize },

    #[error("node {0} is not in the route graph")]
    UnknownNode(usize),

    #[error("history length mismatch: expected {expected}, got {got}")]
    HistoryLength { expected: usize, got: usize },

    #[error("input dimension mismatch: expected {expected}, got {got}")]
    InputDim { expected: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("binomial interval needs n >= 1")]
    NoTrials,

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("segment index {index} out of range ({count} segments)")]
    SegmentIndex { index: usize, count: usize },

    #[error("missing experiment cells: {0:?}")]
    MissingCells(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
