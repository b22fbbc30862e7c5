//! Two-state collapse dynamics.
//!
//! The polar angle obeys
//!
//! ```text
//! dθ = -J sin θ (cos θ - (G/J) ξ(t)) dt
//! ```
//!
//! read in the Stratonovich sense by default. The Heun integrator works in
//! the chart `u = ln tan(θ/2)`, where the equation becomes
//! `du = (J tanh u + G ξ) dt`: the noise enters additively, the poles sit at
//! `u = ±∞` and are never crossed, and the Stratonovich chain rule makes the
//! change of variables exact. The Itô option is a plain Euler–Maruyama step
//! on θ itself.
//!
//! The amplitude-level generator `(J⟨σ_z⟩ + Gξ)(σ_z - ⟨σ_z⟩)` induces
//! `dθ = -2 sin θ (J cos θ + G ξ) dt` on the polar angle, i.e. the equation
//! above with `(J, G, ξ) → (2J, 2G, -ξ)`. [`SuvParams::state_vector_equivalent`]
//! performs that mapping for cross-checks between the two integrators.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bloch::{BlochState, StateVector};
use crate::error::{Error, Result};
use crate::noise::{NoiseKind, NoisePath};

/// Overshoot past a pole that is reflected back rather than clamped.
const REFLECT_LIMIT: f64 = 1e-6;

/// Physical couplings of the collapse model.
///
/// `epsilon` and `n_order` multiply the whole non-unitary generator, so the
/// two-state dynamics only ever see the effective rates `ε𝒩J` and `ε𝒩G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuvParams {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "G")]
    pub g: f64,
    pub epsilon: f64,
    #[serde(rename = "N_order")]
    pub n_order: f64,
    pub omega_rabi: f64,
}

impl Default for SuvParams {
    fn default() -> Self {
        Self {
            j: 1.0,
            g: 1.0,
            epsilon: 1.0,
            n_order: 1.0,
            omega_rabi: 0.0,
        }
    }
}

impl SuvParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be finite and non-negative, got {v}")))
            }
        };
        nonneg("J", self.j)?;
        nonneg("G", self.g)?;
        nonneg("epsilon", self.epsilon)?;
        nonneg("omega_rabi", self.omega_rabi)?;
        if !(self.n_order >= 1.0) || !self.n_order.is_finite() {
            return Err(Error::param("N_order", format!("must be ≥ 1, got {}", self.n_order)));
        }
        Ok(())
    }

    pub fn effective_j(&self) -> f64 {
        self.epsilon * self.n_order * self.j
    }

    pub fn effective_g(&self) -> f64 {
        self.epsilon * self.n_order * self.g
    }

    /// Same couplings with `G = ratio · J`.
    pub fn with_g_over_j(mut self, ratio: f64) -> Self {
        self.g = ratio * self.j;
        self
    }

    /// Couplings for [`evolve_state_vector`] whose induced polar-angle
    /// dynamics, driven by the negated noise path, coincide with
    /// [`evolve_trajectory`] under `self`.
    pub fn state_vector_equivalent(&self) -> SuvParams {
        SuvParams {
            j: 0.5 * self.j,
            g: 0.5 * self.g,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    StratonovichHeun,
    ItoEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub max_time: f64,
    /// Half-width δ of the pole bands `θ < δ` and `θ > π - δ`.
    pub pole_epsilon: f64,
    pub renormalize_every_step: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            scheme: Scheme::StratonovichHeun,
            max_time: 60.0,
            pole_epsilon: 1e-3,
            renormalize_every_step: true,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::param("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.max_time > 0.0) || !self.max_time.is_finite() {
            return Err(Error::param("max_time", format!("must be positive, got {}", self.max_time)));
        }
        if !(self.pole_epsilon > 0.0 && self.pole_epsilon < PI / 2.0) {
            return Err(Error::param(
                "pole_epsilon",
                format!("must lie in (0, π/2), got {}", self.pole_epsilon),
            ));
        }
        Ok(())
    }

    /// Number of steps covering `max_time`.
    pub fn n_steps(&self) -> usize {
        (self.max_time / self.dt).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pole0,
    Pole1,
    Unresolved,
}

impl Outcome {
    /// `⟨σ_z⟩` of the pointer state, if resolved.
    pub fn sigma_z(&self) -> Option<f64> {
        match self {
            Outcome::Pole0 => Some(1.0),
            Outcome::Pole1 => Some(-1.0),
            Outcome::Unresolved => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub thetas: Vec<f64>,
    pub outcome: Outcome,
    pub collapse_time: Option<f64>,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub attractive: Vec<f64>,
    pub repulsive: Vec<f64>,
}

/// `dθ/dt = -J sin θ (cos θ - (G/J) ξ)`.
pub fn theta_drift(theta: f64, xi: f64, j: f64, g: f64) -> Result<f64> {
    Ok(-theta.sin() * (j * theta.cos() - coupled_field(xi, j, g)?))
}

/// `J · (G/J) ξ`, rejecting the ill-defined ratio at `J = 0`.
fn coupled_field(xi: f64, j: f64, g: f64) -> Result<f64> {
    if j == 0.0 && g != 0.0 {
        return Err(Error::IllDefinedRatio { g });
    }
    Ok(g * xi)
}

/// Fixed points of the drift under a frozen field.
///
/// Poles are classified by linear stability; for `|(G/J)ξ| < 1` both are
/// attractive and `arccos((G/J)ξ)` is the single repulsive interior point.
/// At `|(G/J)ξ| ≥ 1` the drift is one-signed and only the downstream pole
/// attracts.
pub fn classify_fixed_points(xi: f64, j: f64, g: f64) -> Result<FixedPointReport> {
    if !(j > 0.0) {
        return Err(if g != 0.0 {
            Error::IllDefinedRatio { g }
        } else {
            Error::param("J", "fixed points need J > 0")
        });
    }
    let r = g / j * xi;
    let mut attractive = Vec::with_capacity(2);
    if r < 1.0 {
        attractive.push(0.0);
    }
    if r > -1.0 {
        attractive.push(PI);
    }
    let repulsive = if r.abs() < 1.0 { vec![r.acos()] } else { Vec::new() };
    Ok(FixedPointReport {
        attractive,
        repulsive,
    })
}

/// Tabulates `(θ, dθ/dt)` over a grid inside `[0, π]`.
pub fn flow_field(theta_grid: &[f64], xi: f64, j: f64, g: f64) -> Result<Vec<(f64, f64)>> {
    theta_grid
        .iter()
        .map(|&theta| {
            if !(0.0..=PI).contains(&theta) {
                return Err(Error::param("theta_grid", format!("{theta} outside [0, π]")));
            }
            Ok((theta, theta_drift(theta, xi, j, g)?))
        })
        .collect()
}

/// Integrator state at one grid time.
#[derive(Debug, Clone, Copy)]
pub(crate) enum PolarPoint {
    LogTan(f64),
    Angle(f64),
}

impl PolarPoint {
    #[inline]
    pub(crate) fn theta(self) -> f64 {
        match self {
            PolarPoint::LogTan(u) => 2.0 * u.exp().atan(),
            PolarPoint::Angle(theta) => theta,
        }
    }

    #[inline]
    pub(crate) fn sigma_z(self) -> f64 {
        match self {
            PolarPoint::LogTan(u) => -u.tanh(),
            PolarPoint::Angle(theta) => theta.cos(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct CollapseRun {
    pub outcome: Outcome,
    pub collapse_step: Option<usize>,
}

/// Polar-angle integrator with pole-band absorption.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PolarIntegrator {
    j: f64,
    g: f64,
    dt: f64,
    scheme: Scheme,
    pole_epsilon: f64,
    /// `ln tan(δ/2)`; the upper band is its negative.
    band_u: f64,
}

impl PolarIntegrator {
    pub(crate) fn new(params: &SuvParams, cfg: &IntegratorConfig) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        let (j, g) = (params.effective_j(), params.effective_g());
        if j == 0.0 && g != 0.0 {
            return Err(Error::IllDefinedRatio { g });
        }
        Ok(Self {
            j,
            g,
            dt: cfg.dt,
            scheme: cfg.scheme,
            pole_epsilon: cfg.pole_epsilon,
            band_u: (0.5 * cfg.pole_epsilon).tan().ln(),
        })
    }

    fn band_of_theta(&self, theta: f64) -> Option<Outcome> {
        if theta < self.pole_epsilon {
            Some(Outcome::Pole0)
        } else if theta > PI - self.pole_epsilon {
            Some(Outcome::Pole1)
        } else {
            None
        }
    }

    /// Runs from `theta0` for at most `max_steps`, pulling one field sample
    /// per step and reporting the state after every step (and at step 0).
    /// Stops at the first pole-band entry.
    pub(crate) fn run(
        &self,
        theta0: f64,
        max_steps: usize,
        mut next_xi: impl FnMut() -> f64,
        mut observe: impl FnMut(usize, PolarPoint),
    ) -> Result<CollapseRun> {
        observe(0, PolarPoint::Angle(theta0));
        if let Some(outcome) = self.band_of_theta(theta0) {
            return Ok(CollapseRun {
                outcome,
                collapse_step: Some(0),
            });
        }
        let (j, g, dt) = (self.j, self.g, self.dt);
        match self.scheme {
            Scheme::StratonovichHeun => {
                let mut u = (0.5 * theta0).tan().ln();
                let lower = self.band_u;
                let upper = -self.band_u;
                for step in 1..=max_steps {
                    let forcing = g * next_xi() * dt;
                    let f0 = j * u.tanh();
                    let predicted = u + f0 * dt + forcing;
                    u += 0.5 * (f0 + j * predicted.tanh()) * dt + forcing;
                    if !u.is_finite() {
                        return Err(Error::NumericBlowup { step });
                    }
                    observe(step, PolarPoint::LogTan(u));
                    let outcome = if u < lower {
                        Outcome::Pole0
                    } else if u > upper {
                        Outcome::Pole1
                    } else {
                        continue;
                    };
                    return Ok(CollapseRun {
                        outcome,
                        collapse_step: Some(step),
                    });
                }
            }
            Scheme::ItoEuler => {
                let mut theta = theta0;
                for step in 1..=max_steps {
                    let (s, c) = theta.sin_cos();
                    theta += -s * (j * c - g * next_xi()) * dt;
                    if !theta.is_finite() {
                        return Err(Error::NumericBlowup { step });
                    }
                    theta = reflect_into_range(theta);
                    observe(step, PolarPoint::Angle(theta));
                    if let Some(outcome) = self.band_of_theta(theta) {
                        return Ok(CollapseRun {
                            outcome,
                            collapse_step: Some(step),
                        });
                    }
                }
            }
        }
        Ok(CollapseRun {
            outcome: Outcome::Unresolved,
            collapse_step: None,
        })
    }
}

/// Keeps θ in `[0, π]`: small overshoots are mirrored, larger ones clamped.
fn reflect_into_range(theta: f64) -> f64 {
    if theta < 0.0 {
        if -theta < REFLECT_LIMIT {
            -theta
        } else {
            0.0
        }
    } else if theta > PI {
        let over = theta - PI;
        if over < REFLECT_LIMIT {
            PI - over
        } else {
            PI
        }
    } else {
        theta
    }
}

fn check_path(path: &NoisePath, cfg: &IntegratorConfig, needed: usize) -> Result<()> {
    let frozen = matches!(path.kind, NoiseKind::ConstantField { .. });
    if !frozen && (path.dt - cfg.dt).abs() > 1e-12 * cfg.dt {
        return Err(Error::DtMismatch {
            path: path.dt,
            config: cfg.dt,
        });
    }
    if path.len() < needed {
        return Err(Error::NoiseTooShort {
            needed,
            available: path.len(),
        });
    }
    Ok(())
}

/// Integrates the polar-angle equation along one noise realization.
///
/// `ξ_k = path.values[k]` drives step `k`. The run stops at the first
/// pole-band entry or after `cfg.max_time`.
pub fn evolve_trajectory(
    s0: &BlochState,
    params: &SuvParams,
    path: &NoisePath,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let integrator = PolarIntegrator::new(params, cfg)?;
    let n_steps = cfg.n_steps();
    check_path(path, cfg, n_steps)?;

    let mut times = Vec::new();
    let mut thetas = Vec::new();
    let mut samples = path.values.iter().copied();
    let run = integrator.run(
        s0.theta(),
        n_steps,
        || samples.next().unwrap_or(0.0),
        |step, point| {
            times.push(step as f64 * cfg.dt);
            thetas.push(point.theta());
        },
    )?;
    Ok(Trajectory {
        times,
        thetas,
        outcome: run.outcome,
        collapse_time: run.collapse_step.map(|k| k as f64 * cfg.dt),
        noise_seed: path.seed,
    })
}

/// Generator action `A(v)·w` of the modified Schrödinger equation (ħ = 1):
/// `-i(Ω/2)σ_x w + ε𝒩(J⟨σ_z⟩ + Gξ)(σ_z - ⟨σ_z⟩) w`, with `⟨σ_z⟩` taken in `v`.
#[derive(Debug, Clone, Copy)]
struct AmplitudeGenerator {
    j: f64,
    g: f64,
    half_omega: f64,
}

impl AmplitudeGenerator {
    fn apply(&self, v: &StateVector, xi: f64) -> StateVector {
        let z = v.sigma_z_expectation();
        let k = self.j * z + self.g * xi;
        let mut c0 = v.c0 * (k * (1.0 - z));
        let mut c1 = v.c1 * (-k * (1.0 + z));
        if self.half_omega != 0.0 {
            let minus_i = Complex64::new(0.0, -self.half_omega);
            c0 += minus_i * v.c1;
            c1 += minus_i * v.c0;
        }
        StateVector { c0, c1 }
    }
}

fn axpy(v: &StateVector, a: f64, d: &StateVector) -> StateVector {
    StateVector {
        c0: v.c0 + d.c0 * a,
        c1: v.c1 + d.c1 * a,
    }
}

/// Integrates the amplitudes under the non-unitary generator, returning the
/// state after every step (initial state first).
///
/// `ξ_k` is held constant over step `k`; the Heun scheme is the
/// Stratonovich-consistent choice, matching [`evolve_trajectory`].
pub fn evolve_state_vector(
    v0: &StateVector,
    params: &SuvParams,
    path: &NoisePath,
    cfg: &IntegratorConfig,
    include_h0: bool,
) -> Result<Vec<StateVector>> {
    params.validate()?;
    cfg.validate()?;
    if (v0.norm_sqr() - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidState(format!(
            "initial amplitudes not normalized: |v|² = {}",
            v0.norm_sqr()
        )));
    }
    let n_steps = cfg.n_steps();
    check_path(path, cfg, n_steps)?;

    let generator = AmplitudeGenerator {
        j: params.effective_j(),
        g: params.effective_g(),
        half_omega: if include_h0 { 0.5 * params.omega_rabi } else { 0.0 },
    };
    let dt = cfg.dt;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut v = *v0;
    states.push(v);
    for &xi in &path.values[..n_steps] {
        let k1 = generator.apply(&v, xi);
        let next = match cfg.scheme {
            Scheme::StratonovichHeun => {
                let predicted = axpy(&v, dt, &k1);
                if !(predicted.norm_sqr() > 0.0) {
                    return Err(Error::ZeroNorm);
                }
                let k2 = generator.apply(&predicted, xi);
                StateVector {
                    c0: v.c0 + (k1.c0 + k2.c0) * (0.5 * dt),
                    c1: v.c1 + (k1.c1 + k2.c1) * (0.5 * dt),
                }
            }
            Scheme::ItoEuler => axpy(&v, dt, &k1),
        };
        v = if cfg.renormalize_every_step {
            next.renormalize()?
        } else {
            if !(next.norm_sqr() > 0.0) || !next.norm_sqr().is_finite() {
                return Err(Error::ZeroNorm);
            }
            next
        };
        states.push(v);
    }
    Ok(states)
}

/// Unitary evolution under `H₀ = (Ω/2)σ_x` by exact per-step rotation.
///
/// Steps have length `dt` except a shorter final step landing on `t_end`.
pub fn rabi_evolution(v0: &StateVector, omega: f64, dt: f64, t_end: f64) -> Result<Vec<StateVector>> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::param("omega", format!("must be positive, got {omega}")));
    }
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::param("dt", "need dt > 0 and t_end ≥ 0"));
    }
    let rotation = |h: f64| {
        let (s, c) = (0.5 * omega * h).sin_cos();
        (c, Complex64::new(0.0, -s))
    };
    let apply = |v: &StateVector, (c, mis): (f64, Complex64)| StateVector {
        c0: v.c0 * c + mis * v.c1,
        c1: v.c1 * c + mis * v.c0,
    };
    let full = (t_end / dt).floor() as usize;
    let remainder = t_end - full as f64 * dt;
    let step = rotation(dt);
    let mut out = Vec::with_capacity(full + 2);
    let mut v = *v0;
    out.push(v);
    for _ in 0..full {
        v = apply(&v, step);
        out.push(v);
    }
    if remainder > 1e-12 * dt {
        v = apply(&v, rotation(remainder));
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{sample_constant, sample_white};

    const ETA: f64 = 2.0 * PI / 5.0;

    fn cfg(dt: f64, max_time: f64) -> IntegratorConfig {
        IntegratorConfig {
            dt,
            max_time,
            ..Default::default()
        }
    }

    fn unit(j: f64, g: f64) -> SuvParams {
        SuvParams {
            j,
            g,
            ..Default::default()
        }
    }

    #[test]
    fn drift_vanishes_at_poles() {
        for xi in [-3.0, 0.0, 0.7] {
            assert_eq!(theta_drift(0.0, xi, 1.0, 1.0).unwrap(), 0.0);
            assert!(theta_drift(PI, xi, 1.0, 1.0).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn drift_below_repulsive_point_flows_to_zero() {
        let xi = ETA.cos();
        let d = theta_drift(PI / 5.0, xi, 1.0, 1.0).unwrap();
        let expected = -(PI / 5.0).sin() * ((PI / 5.0).cos() - xi);
        assert!((d - expected).abs() < 1e-15);
        assert!((d + 0.29389).abs() < 1e-5, "{d}");
    }

    #[test]
    fn drift_rejects_zero_self_coupling_with_noise() {
        assert!(matches!(
            theta_drift(1.0, 0.5, 0.0, 1.0),
            Err(Error::IllDefinedRatio { .. })
        ));
        assert_eq!(theta_drift(1.0, 0.5, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn fixed_points_of_figure_flow() {
        let report = classify_fixed_points(ETA.cos(), 1.0, 1.0).unwrap();
        assert_eq!(report.attractive, vec![0.0, PI]);
        assert_eq!(report.repulsive.len(), 1);
        assert!((report.repulsive[0] - ETA).abs() < 1e-12);

        let report = classify_fixed_points(0.0, 1.0, 1.0).unwrap();
        assert_eq!(report.repulsive, vec![PI / 2.0]);
    }

    #[test]
    fn strong_field_removes_repulsive_point() {
        let report = classify_fixed_points(2.0, 1.0, 1.0).unwrap();
        assert!(report.repulsive.is_empty());
        assert_eq!(report.attractive, vec![PI]);
        // sign analysis on an interior grid: drift strictly positive
        let grid: Vec<f64> = (1..200).map(|i| PI * i as f64 / 200.0).collect();
        let flow = flow_field(&grid, 2.0, 1.0, 1.0).unwrap();
        assert!(flow.iter().all(|&(_, d)| d > 0.0));
    }

    #[test]
    fn flow_field_signs() {
        let flow = flow_field(&[0.0, PI / 2.0, PI], 0.0, 1.0, 1.0).unwrap();
        assert!(flow.iter().all(|&(_, d)| d.abs() < 1e-15));

        let grid: Vec<f64> = (1..400).map(|i| PI * i as f64 / 400.0).collect();
        for (theta, d) in flow_field(&grid, ETA.cos(), 1.0, 1.0).unwrap() {
            if theta < ETA - 1e-9 {
                assert!(d < 0.0, "θ={theta}");
            } else if theta > ETA + 1e-9 {
                assert!(d > 0.0, "θ={theta}");
            }
        }

        for (_, d) in flow_field(&grid, 1.0, 1.0, 1.0).unwrap() {
            assert!(d >= 0.0);
        }
        assert!(flow_field(&[-0.1], 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn frozen_field_trajectories_reach_expected_poles() {
        let path = sample_constant(ETA.cos(), 600_000).unwrap();
        let c = cfg(1e-4, 60.0);
        let below = evolve_trajectory(&BlochState::from_polar(PI / 5.0).unwrap(), &unit(1.0, 1.0), &path, &c)
            .unwrap();
        assert_eq!(below.outcome, Outcome::Pole0);
        let above = evolve_trajectory(
            &BlochState::from_polar(3.0 * PI / 5.0).unwrap(),
            &unit(1.0, 1.0),
            &path,
            &c,
        )
        .unwrap();
        assert_eq!(above.outcome, Outcome::Pole1);
        assert!(below.thetas.iter().all(|t| (0.0..=PI).contains(t)));
        assert!(above.thetas.iter().all(|t| (0.0..=PI).contains(t)));
    }

    #[test]
    fn pointer_states_are_absorbing() {
        let path = sample_white(1e-4, 10_000, 3).unwrap();
        for scheme in [Scheme::StratonovichHeun, Scheme::ItoEuler] {
            let c = IntegratorConfig {
                scheme,
                ..cfg(1e-4, 1.0)
            };
            let t = evolve_trajectory(&BlochState::from_polar(0.0).unwrap(), &unit(1.0, 1.0), &path, &c)
                .unwrap();
            assert_eq!(t.outcome, Outcome::Pole0);
            assert_eq!(t.collapse_time, Some(0.0));
            assert_eq!(t.thetas, vec![0.0]);
            let t = evolve_trajectory(&BlochState::from_polar(PI).unwrap(), &unit(1.0, 1.0), &path, &c)
                .unwrap();
            assert_eq!(t.outcome, Outcome::Pole1);
        }
    }

    #[test]
    fn outcome_matches_final_theta() {
        let path = sample_white(1e-4, 200_000, 12).unwrap();
        let c = cfg(1e-4, 20.0);
        for (i, theta0) in [0.4, 1.2, 2.0, 2.9].into_iter().enumerate() {
            let path = if i % 2 == 0 { path.clone() } else { path.negated() };
            let t = evolve_trajectory(&BlochState::from_polar(theta0).unwrap(), &unit(1.0, 1.0), &path, &c)
                .unwrap();
            let last = *t.thetas.last().unwrap();
            match t.outcome {
                Outcome::Pole0 => assert!(last < c.pole_epsilon),
                Outcome::Pole1 => assert!(last > PI - c.pole_epsilon),
                Outcome::Unresolved => {
                    assert!(last >= c.pole_epsilon && last <= PI - c.pole_epsilon)
                }
            }
            assert_eq!(t.times.len(), t.thetas.len());
        }
    }

    #[test]
    fn mirrored_runs_are_mirror_images() {
        let path = sample_white(1e-4, 50_000, 77).unwrap();
        let c = cfg(1e-4, 5.0);
        for scheme in [Scheme::StratonovichHeun, Scheme::ItoEuler] {
            let c = IntegratorConfig { scheme, ..c };
            let a = evolve_trajectory(&BlochState::from_polar(1.1).unwrap(), &unit(1.0, 1.0), &path, &c)
                .unwrap();
            let b = evolve_trajectory(
                &BlochState::from_polar(PI - 1.1).unwrap(),
                &unit(1.0, 1.0),
                &path.negated(),
                &c,
            )
            .unwrap();
            assert_eq!(a.thetas.len(), b.thetas.len());
            for (x, y) in a.thetas.iter().zip(&b.thetas) {
                assert!((x + y - PI).abs() < 1e-12, "{x} + {y}");
            }
        }
    }

    #[test]
    fn heun_converges_at_least_first_order_on_frozen_field() {
        // constant ξ: the equation is an ODE, evaluated at t = 2 before any band entry
        let xi = 0.2;
        let params = unit(1.0, 1.0);
        let t_end = 2.0;
        let theta_at = |dt: f64| {
            let c = IntegratorConfig {
                dt,
                max_time: t_end,
                pole_epsilon: 1e-12,
                ..Default::default()
            };
            let path = sample_constant(xi, c.n_steps()).unwrap();
            *evolve_trajectory(&BlochState::from_polar(1.0).unwrap(), &params, &path, &c)
                .unwrap()
                .thetas
                .last()
                .unwrap()
        };
        let coarse = 0.05;
        let reference = theta_at(coarse / 16.0);
        let e1 = (theta_at(coarse) - reference).abs();
        let e2 = (theta_at(coarse / 2.0) - reference).abs();
        assert!(e1 / e2 >= 2.0, "error ratio {}", e1 / e2);
    }

    #[test]
    fn noise_path_preconditions() {
        let path = sample_white(1e-3, 10, 1).unwrap();
        let s0 = BlochState::from_polar(1.0).unwrap();
        assert!(matches!(
            evolve_trajectory(&s0, &unit(1.0, 1.0), &path, &cfg(1e-4, 1e-3)),
            Err(Error::DtMismatch { .. })
        ));
        assert!(matches!(
            evolve_trajectory(&s0, &unit(1.0, 1.0), &path, &cfg(1e-3, 1.0)),
            Err(Error::NoiseTooShort { .. })
        ));
        assert!(matches!(
            evolve_trajectory(&s0, &unit(0.0, 1.0), &path, &cfg(1e-3, 1e-2)),
            Err(Error::IllDefinedRatio { .. })
        ));
    }

    #[test]
    fn state_vector_pointer_state_is_stationary() {
        let path = sample_white(1e-4, 1000, 2).unwrap();
        let states = evolve_state_vector(
            &StateVector::from_real(1.0, 0.0),
            &unit(1.0, 1.0),
            &path,
            &cfg(1e-4, 0.1),
            false,
        )
        .unwrap();
        for v in states {
            assert_eq!(v, StateVector::from_real(1.0, 0.0));
        }
    }

    #[test]
    fn state_vector_equator_is_unstable_equilibrium() {
        let path = sample_constant(0.0, 1000).unwrap();
        let v0 = BlochState::from_polar(PI / 2.0).unwrap().to_state_vector();
        let states = evolve_state_vector(&v0, &unit(1.0, 0.0), &path, &cfg(1e-4, 0.1), false).unwrap();
        for (k, v) in states.iter().enumerate() {
            assert!(v.sigma_z_expectation().abs() < 1e-8 * (k.max(1) as f64));
        }
    }

    #[test]
    fn state_vector_matches_polar_integrator() {
        let dt = 1e-4;
        let path = sample_white(dt, 100_000, 31).unwrap();
        let c = IntegratorConfig {
            pole_epsilon: 1e-6,
            ..cfg(dt, 10.0)
        };
        let params = unit(1.0, 1.0);
        let traj = evolve_trajectory(&BlochState::from_polar(PI / 3.0).unwrap(), &params, &path, &c).unwrap();
        let v0 = BlochState::from_polar(PI / 3.0).unwrap().to_state_vector();
        let states =
            evolve_state_vector(&v0, &params.state_vector_equivalent(), &path.negated(), &c, false).unwrap();
        let max_dev = traj
            .thetas
            .iter()
            .zip(&states)
            .map(|(t, v)| (t - v.sigma_z_expectation().clamp(-1.0, 1.0).acos()).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-3, "max |Δθ| = {max_dev}");
    }

    #[test]
    fn rabi_closes_after_one_period() {
        let omega = 2.0;
        let v0 = StateVector::from_real(1.0, 0.0);
        let states = rabi_evolution(&v0, omega, 1e-3, 2.0 * PI / omega).unwrap();
        for v in &states {
            assert!((v.norm_sqr() - 1.0).abs() < 1e-12);
        }
        assert!(v0.fidelity(states.last().unwrap()) > 1.0 - 1e-10);

        let half = rabi_evolution(&v0, omega, 1e-3, PI / omega).unwrap();
        assert!((half.last().unwrap().c1.norm() - 1.0).abs() < 1e-10);
        assert!(rabi_evolution(&v0, 0.0, 1e-3, 1.0).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(IntegratorConfig { dt: 0.0, ..Default::default() }.validate().is_err());
        assert!(IntegratorConfig { pole_epsilon: 2.0, ..Default::default() }.validate().is_err());
        assert!(SuvParams { n_order: 0.5, ..Default::default() }.validate().is_err());
        assert!(SuvParams { g: -1.0, ..Default::default() }.validate().is_err());
    }
}
