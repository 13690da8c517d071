use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("moment of degree {degree} exceeds the supported pairing cap of 12")]
    UnsupportedOrder { degree: usize },

    #[error("invalid covariance: {0}")]
    InvalidOmega(String),

    #[error("covariance is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("invalid overlap state: {0}")]
    InvalidState(String),

    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("integration blew up at step {step}: {reason}")]
    IntegrationBlowup { step: usize, reason: String },

    #[error("SDE step rejected: {reason}")]
    StepRejected { reason: String },

    #[error("SGD diverged at step {step}")]
    Divergence { step: u64 },

    #[error("threshold never crossed; final excess-risk ratio {final_ratio}")]
    NoCrossing { final_ratio: f64 },

    #[error("linearized growth rate {rate} is not positive; escape never happens")]
    UnstableRate { rate: f64 },

    #[error("diffusion coefficient vanishes; deterministic dynamics never leave the saddle")]
    DegenerateDiffusion,

    #[error("series did not converge within {terms} terms")]
    Precision { terms: usize },

    #[error("cannot initialize p = {p} weights in d = {d} dimensions (need d > p)")]
    IllConditionedInit { d: usize, p: usize },

    #[error("width p = {p} exceeds the cap of {cap}")]
    SizeCap { p: usize, cap: usize },

    #[error("critical point classification disagrees with its spectrum: {0}")]
    Classification(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
