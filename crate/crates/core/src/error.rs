use thiserror::Error;

pub type Result<T> = std::result::Result<T, SptError>;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum SptError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corpus ingestion failed: {0}")]
    Ingestion(String),

    #[error("{path} has {} invalid record(s):\n{}", .records.len(), format_records(.records))]
    InvalidRecords {
        path: String,
        records: Vec<RecordError>,
    },

    #[error("training diverged at step {step} (batch {batch}): {component} is not finite")]
    Diverged {
        step: usize,
        batch: usize,
        component: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One rejected corpus line: its 1-based line number and what was wrong.
#[derive(Debug, Clone)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

fn format_records(records: &[RecordError]) -> String {
    records
        .iter()
        .map(|r| format!("  line {}: {}", r.line, r.message))
        .collect::<Vec<_>>()
        .join("\n")
}
