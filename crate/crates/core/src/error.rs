use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("zero spectral mode undefined for Riesz covariance")]
    ZeroModeUndefined,

    #[error("quadrature did not reach tolerance {tolerance:e} (achieved {achieved:e})")]
    Quadrature { tolerance: f64, achieved: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("solution blew up at time step {step}")]
    BlowUp { step: usize },

    #[error("Picard iteration diverged at iteration {iteration}")]
    PicardDivergence { iteration: usize },

    #[error("grid too large: workspace needs {needed} bytes, budget is {budget}")]
    GridTooLarge { needed: usize, budget: usize },

    #[error("construction hypothesis failed: {0}")]
    Bracket(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("poor tilt: effective sample size {ess:.1} below {min}")]
    PoorTilt { ess: f64, min: f64 },

    #[error("localization set is empty at level {level}; theta too small")]
    EmptyLocalization { level: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Missing(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
