use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid jump law at state {state}: {reason}")]
    InvalidLaw { state: u64, reason: String },

    #[error("moment targets infeasible at state {state}: {reason}")]
    Infeasible { state: u64, reason: String },

    #[error("product formula undefined: p_-({state}) = 0")]
    FormulaUndefined { state: u64 },

    #[error("truncated chain is reducible; states not communicating with 0: {component:?}")]
    Reducible { component: Vec<u64> },

    #[error("linear system singular at row {row}")]
    Singular { row: usize },

    #[error("chain is not classified {expected}: {detail}")]
    Classification {
        expected: &'static str,
        detail: String,
    },

    #[error("harmonic function not positive at needed state {state} (V = {value})")]
    NonPositiveHarmonic { state: u64, value: f64 },

    #[error("transformed kernel row {state} sums to {sum}, not 1")]
    RowSum { state: u64, sum: f64 },

    #[error("simulation budget exceeded: {requested} events requested, cap is {cap}")]
    Budget { requested: u128, cap: u128 },

    #[error("only {cycles} regeneration cycles completed, at least {required} required")]
    InsufficientCycles { cycles: u64, required: u64 },

    #[error("state {state} left the supported range of the chain")]
    SupportExit { state: u64 },

    #[error("config error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
