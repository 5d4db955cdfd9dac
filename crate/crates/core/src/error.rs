use thiserror::Error;

/// Errors surfaced by the platoon model, the numerical kernels and the
/// simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no interior equilibrium for speed {v_star} m/s (must lie in (0, {v_max}))")]
    NoEquilibrium { v_star: f64, v_max: f64 },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not Hurwitz: {0}")]
    NotHurwitz(String),

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("Riccati iteration did not converge after {iterations} steps (residual {residual:e}); pair is likely not detectable")]
    RiccatiDiverged { iterations: usize, residual: f64 },

    #[error("history error: {0}")]
    History(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical synthesis (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::RiccatiDiverged { .. } | Error::NotHurwitz(_) | Error::Singular(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
