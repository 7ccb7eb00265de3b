use thiserror::Error;

/// Errors produced by model evaluation, the linear solve and the optimizers.
#[derive(Debug, Error, Clone, PartialEq)]
#[non_exhaustive]
pub enum Error {
    /// A basis function (or the offset, when `basis` is `None`) returned a
    /// non-finite value.
    #[error("model `{model}` is not finite at t = {t}: {} = {value}", describe_term(*.basis))]
    Domain {
        model: String,
        basis: Option<usize>,
        t: f64,
        value: f64,
    },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    /// The weighted design matrix lost rank and the strict policy is active.
    #[error("rank-deficient design matrix{}: rank {rank} < {columns}", probe_suffix(.probe))]
    RankDeficient {
        rank: usize,
        columns: usize,
        probe: Option<String>,
    },

    #[error("singular system: {0}")]
    Singular(String),

    /// A covariance diagonal came out negative, so the point is not a minimum.
    #[error("indefinite reduced Hessian: diagonal entry {index} of the inverse is {value}")]
    Indefinite { index: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Failure inside one file of a multi-file problem.
    #[error("file {index}: {source}")]
    File { index: usize, source: Box<Error> },
}

fn describe_term(basis: Option<usize>) -> String {
    match basis {
        Some(n) => format!("basis[{n}]"),
        None => "offset".to_string(),
    }
}

fn probe_suffix(probe: &Option<String>) -> String {
    match probe {
        Some(p) => format!(" at probe {p}"),
        None => String::new(),
    }
}

impl Error {
    /// Attaches probe information to a rank failure, leaving other errors alone.
    pub(crate) fn at_probe(self, probe: impl FnOnce() -> String) -> Self {
        match self {
            Error::RankDeficient {
                rank,
                columns,
                probe: None,
            } => Error::RankDeficient {
                rank,
                columns,
                probe: Some(probe()),
            },
            other => other,
        }
    }
}

impl Error {
    pub(crate) fn in_file(self, index: usize) -> Self {
        Error::File {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
