//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by model parsing, instrument derivation, estimation and the
/// simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Model syntax error with a 1-based source position.
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    /// A `~` or `~~` statement referenced a name never introduced by `=~`.
    #[error("unknown variable `{name}` at line {line}")]
    UnknownVariable { name: String, line: usize },

    /// The same loading, regression or covariance was declared twice.
    #[error("duplicate edge `{edge}` at line {line}")]
    DuplicateEdge { edge: String, line: usize },

    /// A latent variable ended up with no indicators.
    #[error("latent variable `{latent}` has no indicators")]
    NoIndicators { latent: String },

    /// No indicator of the latent can serve as its scaling indicator.
    #[error("latent variable `{latent}` has no admissible scaling indicator (one loading must be free or fixed to 1)")]
    NoScalingIndicator { latent: String },

    /// A scaling indicator with more than one loading cannot anchor the
    /// latent-to-observed transformation.
    #[error("scaling indicator `{indicator}` of `{latent}` carries a cross-loading; scaling indicators must load on exactly one latent")]
    CrossLoadedScalingIndicator { latent: String, indicator: String },

    /// A parameter assignment is missing a free parameter of the model.
    #[error("parameter assignment does not cover `{name}`")]
    MissingParameter { name: String },

    /// A variance parameter was assigned a non-positive value.
    #[error("variance parameter `{name}` must be positive, got {value}")]
    NonPositiveVariance { name: String, value: f64 },

    /// Structural coefficient matrix leaves (I - B) singular.
    #[error("structural system is singular at the supplied parameter values: {context}")]
    SingularSystem { context: String },

    /// A design matrix is rank deficient.
    #[error("{context}: design matrix is rank deficient (columns {columns:?} are collinear with earlier columns)")]
    RankDeficient {
        context: String,
        columns: Vec<usize>,
    },

    /// An equation has fewer model-implied instruments than regressors.
    #[error("equation `{equation}` is underidentified: {miivs} MIIV(s) for {regressors} regressor(s)")]
    Underidentified {
        equation: String,
        miivs: usize,
        regressors: usize,
    },

    /// Overidentification test requested for a just-identified equation.
    #[error("Sargan test undefined: {instruments} instrument(s) for {regressors} regressor(s) leaves zero degrees of overidentification")]
    JustIdentified {
        instruments: usize,
        regressors: usize,
    },

    /// Instrument name not present in any evaluated subset.
    #[error("instrument `{name}` does not appear in any evaluated subset")]
    UnknownInstrument { name: String },

    /// Subset enumeration would exceed the configured cap.
    #[error("{count} instrument subsets exceed the cap of {cap}; raise the cap or enable seeded subset sampling")]
    SubsetCapExceeded { count: u128, cap: usize },

    /// Every candidate first-stage model was dropped or scored -inf.
    #[error("no valid first-stage model for equation `{equation}`")]
    NoValidSubset { equation: String },

    /// Implied covariance matrix is not positive definite where one is required.
    #[error("{context}: implied covariance is not positive definite (minimum eigenvalue {min_eigenvalue:.6e})")]
    NotPositiveDefinite {
        context: String,
        min_eigenvalue: f64,
    },

    /// Configuration rejected before any computation started.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Numerical routine failed to converge or produced non-finite output.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Too many replications failed inside a Monte Carlo condition.
    #[error("condition `{condition}`: {failed} of {total} replications failed (limit 1%); first failure: {first}")]
    TooManyFailures {
        condition: String,
        failed: usize,
        total: usize,
        first: String,
    },

    /// A referenced data column is missing from the dataset.
    #[error("data is missing column `{name}`")]
    MissingColumn { name: String },

    /// Dataset too small for the requested estimation.
    #[error("{context}: {rows} usable row(s) but at least {needed} required")]
    NotEnoughRows {
        context: String,
        rows: usize,
        needed: usize,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {message}")]
    Csv { path: String, message: String },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Coarse classification used by the CLI for exit codes and stable
    /// machine-readable tags.
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Syntax { .. } | UnknownVariable { .. } | DuplicateEdge { .. } | NoIndicators { .. }
            | NoScalingIndicator { .. } | CrossLoadedScalingIndicator { .. }
            | InvalidConfig(_) | Io { .. } | Csv { .. } | Json(_) | MissingColumn { .. } => {
                ErrorKind::Input
            }
            Underidentified { .. } | JustIdentified { .. } | NotPositiveDefinite { .. }
            | NoValidSubset { .. } | UnknownInstrument { .. } | SubsetCapExceeded { .. } => {
                ErrorKind::Identification
            }
            MissingParameter { .. } | NonPositiveVariance { .. } | SingularSystem { .. }
            | RankDeficient { .. } | Numerical(_) | TooManyFailures { .. }
            | NotEnoughRows { .. } => ErrorKind::Numerical,
        }
    }
}

/// Stable error categories surfaced on the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// File, parse or configuration problems.
    Input,
    /// Identification failures (instrument counts, non-PD populations).
    Identification,
    /// Numerical failures during estimation.
    Numerical,
}

impl ErrorKind {
    pub fn tag(self) -> &'static str {
        match self {
            ErrorKind::Input => "input",
            ErrorKind::Identification => "identification",
            ErrorKind::Numerical => "numerical",
        }
    }
}
