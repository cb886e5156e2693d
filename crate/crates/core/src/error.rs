use thiserror::Error;

/// Errors surfaced by the solver and estimator pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input point outside the configured rectangle or interval.
    #[error("domain error: {0}")]
    Domain(String),

    /// Instance or configuration is inconsistent with an operation's contract.
    #[error("configuration error: {0}")]
    Config(String),

    /// An iterative scheme failed to converge or a guard tripped.
    #[error("numerical failure in {stage}: {detail} (worst residual {residual:.3e})")]
    Numerical {
        stage: &'static str,
        detail: String,
        residual: f64,
    },

    /// The extracted free boundary left the configured rectangle.
    #[error("boundary escape at t = {t}: {detail}")]
    BoundaryEscape { t: f64, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
