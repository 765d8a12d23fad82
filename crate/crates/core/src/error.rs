use thiserror::Error;

/// Which feasibility condition an offloading profile violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeasibilityViolation {
    Positivity,
    Conservation,
    Stability,
    LanStability,
    Shape,
}

impl std::fmt::Display for FeasibilityViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Positivity => "positivity",
            Self::Conservation => "conservation",
            Self::Stability => "stability",
            Self::LanStability => "lan-stability",
            Self::Shape => "shape",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("outside function domain: {0}")]
    Domain(String),

    #[error("infeasible ({condition}): {detail}")]
    Feasibility {
        condition: FeasibilityViolation,
        detail: String,
    },

    #[error("no convergence after {iterations} iterations: {detail}")]
    NonConvergence { iterations: usize, detail: String },

    #[error("internal inconsistency: {0}")]
    Internal(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn infeasible(condition: FeasibilityViolation, detail: impl Into<String>) -> Self {
        Self::Feasibility {
            condition,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
