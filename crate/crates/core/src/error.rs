use thiserror::Error;

pub type Result<T, E = FslError> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Infeasible,
    Math,
}

#[derive(Debug, Error)]
pub enum FslError {
    #[error("fold count {folds} exceeds patient count {patients}")]
    FoldCountExceedsPatients { folds: usize, patients: usize },
    #[error("unknown patient `{0}`")]
    UnknownPatient(String),
    #[error("requested {requested} patients but only {available} exist")]
    NotEnoughPatients { requested: usize, available: usize },
    #[error("dataset is empty")]
    DatasetEmpty,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("write failed: {0}")]
    SinkFailure(#[source] std::io::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (expected \"FSLE\")")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("invalid `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("field-of-view circle does not fit inside the image")]
    CircleOutOfBounds,
    #[error("bad grid size {0}")]
    BadGrid(usize),
    #[error("image error: {0}")]
    Image(String),

    #[error("backward needs a scalar output, node has shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("class {0} has no support vectors")]
    EmptyClass(usize),
    #[error("degenerate vector (norm below 1e-12)")]
    DegenerateVector,

    #[error("infeasible episode: {0}")]
    InfeasibleEpisode(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl FslError {
    pub fn kind(&self) -> ErrorKind {
        use FslError::*;
        match self {
            SinkFailure(_)
            | Io(_)
            | BadMagic
            | UnsupportedVersion(_)
            | TruncatedFile(_)
            | MalformedRow { .. }
            | Image(_)
            | Csv(_) => ErrorKind::Io,
            InfeasibleEpisode(_) => ErrorKind::Infeasible,
            NonScalarOutput { .. } | ShapeMismatch { .. } | EmptyClass(_) | DegenerateVector => ErrorKind::Math,
            _ => ErrorKind::Config,
        }
    }
}
