use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
///
/// Variants are grouped by the CLI exit code they map to: data problems (2),
/// numerical failures (3) and configuration mistakes (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("matrix not positive definite after jitter levels {attempted:?}")]
    NotPositiveDefinite { attempted: Vec<f64> },

    #[error("singular covariance block: {0}")]
    SingularBlock(String),

    #[error("rank deficient design: dependent columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("degenerate weights: row {row} sums to {sum}")]
    DegenerateWeights { row: usize, sum: f64 },

    #[error("no overlap information: sum of squared treatment residuals is {0}")]
    NoOverlap(f64),

    #[error("estimator undefined: {0}")]
    Undefined(String),

    #[error("numerical failure at sweep {sweep}: {source}")]
    Sweep {
        sweep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::Argument(_) => "argument",
            Error::Data(_) | Error::RankDeficient { .. } | Error::Csv(_) => "data",
            Error::NoOverlap(_) | Error::Undefined(_) => "data",
            Error::NotPositiveDefinite { .. }
            | Error::SingularBlock(_)
            | Error::DegenerateWeights { .. }
            | Error::Sweep { .. } => "numerical",
            Error::Config(_) | Error::Json(_) => "config",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code: 2 data, 3 numerical, 4 config.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "numerical" => 3,
            "config" | "io" => 4,
            _ => 2,
        }
    }
}
