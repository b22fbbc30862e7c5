use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A non-unitary step drove the amplitude vector to zero norm.
    #[error("collapse solver blowup: state norm vanished")]
    ZeroNorm,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("ill-defined coupling ratio G/J: J = 0 while G = {g}")]
    IllDefinedRatio { g: f64 },

    #[error("numeric blowup: non-finite polar angle at step {step}")]
    NumericBlowup { step: usize },

    #[error("noise path too short: {needed} samples required, {available} available")]
    NoiseTooShort { needed: usize, available: usize },

    #[error("noise path dt = {path} does not match integrator dt = {config}")]
    DtMismatch { path: f64, config: f64 },

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("horizon too short: {unresolved} of {total} trajectories did not reach a pole band")]
    HorizonTooShort { unresolved: usize, total: usize },

    #[error("wavefunction not normalized: norm = {norm}")]
    Normalization { norm: f64 },

    #[error("unsupported potential: degree {degree} exceeds the quadratic limit")]
    UnsupportedPotential { degree: usize },

    #[error("CFL violation along {axis}: Courant number {courant:.4} exceeds {limit}")]
    CflViolation {
        axis: &'static str,
        courant: f64,
        limit: f64,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
