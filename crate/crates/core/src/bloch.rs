//! Two-level pure states in Bloch-angle and amplitude form.
//!
//! Convention: `|ψ⟩ = cos(θ/2)|0⟩ + e^{iφ} sin(θ/2)|1⟩`, so `θ = 0` is the
//! pointer state `|0⟩` and `θ = π` is `|1⟩`. Global phase is discarded when
//! going from amplitudes to angles, and the azimuth at either pole is
//! reported as `φ = 0`.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Squared norm below which an amplitude pair is treated as degenerate.
const DEGENERATE_NORM_SQR: f64 = 1e-14;

/// Pure two-level state on the Bloch sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    theta: f64,
    phi: f64,
}

impl BlochState {
    /// Builds a state from polar angle `theta ∈ [0, π]` and any finite azimuth,
    /// which is wrapped into `[0, 2π)`.
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::InvalidState(format!(
                "polar angle {theta} outside [0, π]"
            )));
        }
        if !phi.is_finite() {
            return Err(Error::InvalidState(format!("azimuth {phi} is not finite")));
        }
        Ok(Self {
            theta,
            phi: wrap_azimuth(phi),
        })
    }

    /// State on the `φ = 0` meridian.
    pub fn from_polar(theta: f64) -> Result<Self> {
        Self::new(theta, 0.0)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn to_state_vector(&self) -> StateVector {
        let half = 0.5 * self.theta;
        StateVector {
            c0: Complex64::new(half.cos(), 0.0),
            c1: Complex64::from_polar(half.sin(), self.phi),
        }
    }

    /// `⟨σ̂_z⟩ = cos θ`.
    pub fn sigma_z_expectation(&self) -> f64 {
        self.theta.cos()
    }

    /// Born weights `(p0, p1) = (cos²(θ/2), sin²(θ/2))`.
    pub fn born_weights(&self) -> (f64, f64) {
        let half = 0.5 * self.theta;
        let (s, c) = half.sin_cos();
        (c * c, s * s)
    }
}

fn wrap_azimuth(phi: f64) -> f64 {
    let wrapped = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if wrapped >= TAU {
        0.0
    } else {
        wrapped
    }
}

/// Amplitude pair `(c0, c1)` in the `{|0⟩, |1⟩}` pointer basis.
///
/// Not necessarily normalized: the collapse generator is non-unitary and the
/// integrators renormalize explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub c0: Complex64,
    pub c1: Complex64,
}

impl StateVector {
    pub fn new(c0: Complex64, c1: Complex64) -> Self {
        Self { c0, c1 }
    }

    pub fn from_real(c0: f64, c1: f64) -> Self {
        Self::new(Complex64::new(c0, 0.0), Complex64::new(c1, 0.0))
    }

    pub fn norm_sqr(&self) -> f64 {
        self.c0.norm_sqr() + self.c1.norm_sqr()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Rescales to unit norm. A zero or non-finite norm means the
    /// non-unitary integration has blown up.
    pub fn renormalize(&self) -> Result<StateVector> {
        let norm = self.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNorm);
        }
        let inv = norm.recip();
        Ok(StateVector {
            c0: self.c0 * inv,
            c1: self.c1 * inv,
        })
    }

    /// `⟨σ̂_z⟩` of the normalized state.
    pub fn sigma_z_expectation(&self) -> f64 {
        let a = self.c0.norm_sqr();
        let b = self.c1.norm_sqr();
        (a - b) / (a + b)
    }

    /// Polar and azimuthal angles, discarding global phase.
    pub fn to_bloch(&self) -> Result<BlochState> {
        if self.norm_sqr() < DEGENERATE_NORM_SQR {
            return Err(Error::InvalidState(format!(
                "degenerate amplitudes, |c0|²+|c1|² = {:e}",
                self.norm_sqr()
            )));
        }
        let r0 = self.c0.norm();
        let r1 = self.c1.norm();
        let theta = 2.0 * r1.atan2(r0);
        let phi = if r0 == 0.0 || r1 == 0.0 {
            0.0
        } else {
            self.c1.arg() - self.c0.arg()
        };
        BlochState::new(theta.clamp(0.0, PI), phi)
    }

    /// `|⟨self|other⟩|²` for normalized inputs.
    pub fn fidelity(&self, other: &StateVector) -> f64 {
        (self.c0.conj() * other.c0 + self.c1.conj() * other.c1).norm_sqr()
    }
}

/// Free-function forms of the conversions.
pub fn to_state_vector(s: &BlochState) -> StateVector {
    s.to_state_vector()
}

pub fn from_state_vector(v: &StateVector) -> Result<BlochState> {
    v.to_bloch()
}

pub fn renormalize(v: &StateVector) -> Result<StateVector> {
    v.renormalize()
}
