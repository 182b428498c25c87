use thiserror::Error;

/// Errors produced by the numerics layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate grid: at least two nodes are required")]
    DegenerateGrid,
    #[error("field contains non-finite values")]
    NonFinite,
    #[error("empty time grid")]
    EmptyTimeGrid,
    #[error("invalid exponents: {0}")]
    InvalidExponents(String),
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("xi grid must have strictly positive entries")]
    NonPositiveXi,
    #[error("mollification index must be >= 1, got {0}")]
    BadMollifierIndex(f64),
    #[error("time window requires s < t (got s = {s}, t = {t})")]
    BadWindow { s: f64, t: f64 },
    #[error("covariance matrix is singular or indefinite; ellipticity input is broken")]
    SingularCovariance,
    #[error("ellipticity sandwich violated: eigenvalue {eig} outside [{lo}, {hi}]")]
    EllipticityViolated { eig: f64, lo: f64, hi: f64 },
    #[error("Picard iteration did not contract after {iters} iterations (observed factor {factor}); lambda too small")]
    NonContraction { iters: usize, factor: f64 },
    #[error("lambda ladder exceeded lambda_max = {lambda_max} without meeting gradient target {target}")]
    LambdaExceeded { lambda_max: f64, target: f64 },
    #[error("fixed-point inversion of the transform failed to converge in {max_iter} iterations at t = {t}")]
    InversionFailed { t: f64, max_iter: usize },
    #[error("Hessian table missing; the variational flow needs second derivatives")]
    MissingHessian,
    #[error("gradient of the initial datum missing")]
    MissingGradient,
    #[error("divergence closure missing for a divergence-free check")]
    MissingDivergence,
    #[error("too few paths: {0} (need at least 100)")]
    TooFewPaths(usize),
    #[error("noise streams do not match across ensembles")]
    MismatchedStreams,
    #[error("separation ladder too short: {0} points (need at least 4)")]
    LadderTooShort(usize),
    #[error("test function support escapes the grid box")]
    SupportEscapesGrid,
    #[error("unsupported dimension {0} (this build handles d <= 3)")]
    UnsupportedDimension(usize),
    #[error("grid mismatch between fields")]
    GridMismatch,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
