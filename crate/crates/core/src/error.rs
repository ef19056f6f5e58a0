use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index out of range: {what} = {index}, limit {limit}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("ill-conditioned volatility: Gram condition number {condition:.3e} exceeds {threshold:.3e}")]
    IllConditionedVolatility { condition: f64, threshold: f64 },

    #[error("simulation overflow on path {path} at step {step}")]
    SimulationOverflow { path: usize, step: usize },

    #[error("singular tangent matrix on path {path} at step {step}")]
    SingularTangent { path: usize, step: usize },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("unsupported combination: {0}")]
    UnsupportedCombination(String),

    #[error("rank-deficient design: {rows} rows for {columns} basis functions")]
    RankDeficientDesign { rows: usize, columns: usize },

    #[error("Hölder exponent theta_phi is required for this rate variant")]
    MissingThetaPhi,

    #[error("proxy provider undefined at t = {t} (horizon {horizon})")]
    ProviderUndefined { t: f64, horizon: f64 },

    #[error("no reference solution available: {0}")]
    MissingReference(String),

    #[error("reference mismatch: {0}")]
    ReferenceMismatch(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("degenerate points: {0}")]
    DegeneratePoints(String),

    #[error("at time index {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at(index: usize) -> impl FnOnce(Error) -> Error {
        move |e| Error::AtIndex {
            index,
            source: Box::new(e),
        }
    }

    /// Strips any [`Error::AtIndex`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIndex { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
