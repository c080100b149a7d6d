use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Operands of an operation have incompatible shapes.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Time-step or vertex index outside its valid range.
    Index {
        what: &'static str,
        value: usize,
        max: usize,
    },
    EmptyInput(&'static str),
    /// All coordinates coincide so distances cannot be normalized.
    DegenerateGeometry,
    /// A required column is missing from an input file.
    Schema {
        path: PathBuf,
        detail: String,
    },
    /// Malformed content in an input file.
    Format {
        path: PathBuf,
        line: Option<u64>,
        detail: String,
    },
    /// Retained vertices lack data on required dates.
    Coverage {
        missing: Vec<String>,
    },
    InsufficientData {
        what: String,
        have: usize,
        need: usize,
    },
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norms: String,
    },
    NegativeTruth {
        index: usize,
        value: f64,
    },
    Checkpoint(String),
    CheckpointMismatch(Vec<String>),
    InvalidArgument(String),
    Io {
        path: Option<PathBuf>,
        source: io::Error,
    },
    Csv(csv::Error),
    Json(serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: Some(path.into()), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "numerics: dimension mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::Index { what, value, max } => {
                write!(f, "graph: {what} index {value} out of range 1..={max}")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::DegenerateGeometry => {
                write!(f, "graph: degenerate geometry, all coordinates identical (max distance is 0)")
            }
            Error::Schema { path, detail } => {
                write!(f, "data: schema error in {}: {detail}", path.display())
            }
            Error::Format { path, line, detail } => match line {
                Some(l) => write!(f, "data: format error in {} line {l}: {detail}", path.display()),
                None => write!(f, "data: format error in {}: {detail}", path.display()),
            },
            Error::Coverage { missing } => {
                write!(f, "data: coverage error, no data for retained vertices: {}", missing.join(", "))
            }
            Error::InsufficientData { what, have, need } => {
                write!(f, "data: insufficient data for {what}: have {have} days, need at least {need}")
            }
            Error::NonFiniteLoss { epoch, batch, param_norms } => {
                write!(f, "training: non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {param_norms}")
            }
            Error::NegativeTruth { index, value } => {
                write!(f, "evaluation: ground truth must be non-negative, found {value} at position {index}")
            }
            Error::Checkpoint(msg) => write!(f, "model: checkpoint error: {msg}"),
            Error::CheckpointMismatch(items) => {
                write!(f, "model: checkpoint incompatible with configuration:\n  {}", items.join("\n  "))
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Io { path: Some(p), source } => write!(f, "i/o error on {}: {source}", p.display()),
            Error::Io { path: None, source } => write!(f, "i/o error: {source}"),
            Error::Csv(e) => write!(f, "csv error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Csv(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(source: io::Error) -> Self {
        Error::Io { path: None, source }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
