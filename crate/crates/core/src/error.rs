use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("no episode in progress")]
    NoEpisode,

    #[error("cursor is terminal; start a new episode or reset")]
    TerminalCursor,

    #[error("invalid action {action} (num_actions = {num_actions})")]
    InvalidAction { action: usize, num_actions: usize },

    #[error("layer {layer} is out of range 1..={horizon}")]
    InvalidLayer { layer: usize, horizon: usize },

    #[error("state {state} at layer {layer} has not been observed in this session")]
    UnobservedState { layer: usize, state: usize },

    #[error("cursor is at layer {actual}, expected layer {expected}")]
    CursorMismatch { expected: usize, actual: usize },

    #[error("function class is empty")]
    EmptyClass,

    #[error("member budget must be positive")]
    BudgetZero,

    #[error("confidence set became empty at iteration {iteration}")]
    EmptyActiveSet { iteration: u64 },

    #[error("core-set at layer {layer} grew to {size}, exceeding the budget {limit}")]
    BudgetExceeded {
        layer: usize,
        size: usize,
        limit: u64,
    },

    #[error("gap {0} is infeasible (must lie in (0, 1])")]
    InfeasibleGap(f64),

    #[error("flattened instance would have {states} states per layer (limit {limit})")]
    FlattenBudget { states: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
