//! Numerical laboratory for spontaneous unitarity violation (SUV) collapse
//! models.
//!
//! * [`bloch`]: two-level states in angle and amplitude form.
//! * [`noise`]: white, Ornstein–Uhlenbeck and frozen noise paths.
//! * [`collapse`]: single-trajectory collapse dynamics on the Bloch sphere.
//! * [`ensemble`]: Monte Carlo ensembles and Born-rule statistics.
//! * [`wigner`]: Wigner phase-space transport of a crystal's centre of mass.

pub mod bloch;
pub mod collapse;
pub mod ensemble;
pub mod error;
pub mod noise;
pub mod wigner;

pub use bloch::{BlochState, StateVector};
pub use collapse::{IntegratorConfig, Outcome, Scheme, SuvParams, Trajectory};
pub use ensemble::{EnsembleConfig, EnsembleResult};
pub use error::{Error, Result};
pub use noise::{NoiseKind, NoisePath};
