use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged on client {client} in round {round}: {detail}")]
    Diverged {
        client: usize,
        round: usize,
        detail: String,
    },

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("config error{}: {msg}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("log holds {have} rounds, need at least {need}")]
    NotEnoughRounds { have: usize, need: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for errors caused by numerical divergence during training.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::NonFinite(_))
    }
}
