//! Realizations of the stochastic field ξ(t) on a uniform time grid.
//!
//! Every generator is a pure function of `(kind, dt, seed, stream)`: the
//! random source is a ChaCha8 generator keyed by the root seed, and
//! independent substreams (one per ensemble trajectory) are selected with
//! the cipher's stream counter, so results never depend on scheduling.
//!
//! Variance conventions:
//! - white noise: `Var(ξ_k) = 1/dt`, the grid realization of `⟨ξ(t)ξ(t')⟩ = δ(t-t')`;
//! - Ornstein–Uhlenbeck: stationary autocovariance `exp(-|Δ|/τ)/(2τ)`,
//!   whose integral is 1, so `τ → 0` recovers the white-noise normalization.
//!
//! The OU path stores the average of the process over each step rather than
//! its value at the grid point. The integrators treat `ξ_k` as constant over
//! step `k`, and with step averages `Σ_k ξ_k dt` is exactly the integrated
//! process; with point samples the integrated variance would be off by a
//! factor `(dt/2τ)·coth(dt/2τ)`, which is 8% at `τ = dt`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Statistical model of the stochastic field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    WhiteNoise,
    OrnsteinUhlenbeck { tau_t: f64 },
    ConstantField { xi: f64 },
}

impl NoiseKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseKind::WhiteNoise => Ok(()),
            NoiseKind::OrnsteinUhlenbeck { tau_t } => {
                if tau_t > 0.0 && tau_t.is_finite() {
                    Ok(())
                } else {
                    Err(Error::param("tau_t", format!("must be positive, got {tau_t}")))
                }
            }
            NoiseKind::ConstantField { xi } => {
                if xi.is_finite() {
                    Ok(())
                } else {
                    Err(Error::param("xi", "must be finite"))
                }
            }
        }
    }

    /// True when the grid step exceeds the correlation time.
    pub fn is_under_resolved(&self, dt: f64) -> bool {
        matches!(*self, NoiseKind::OrnsteinUhlenbeck { tau_t } if dt > tau_t)
    }
}

/// Sampled field values `ξ_k`, one per integration step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    pub kind: NoiseKind,
    pub dt: f64,
    pub seed: u64,
    pub values: Vec<f64>,
}

impl NoisePath {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Path with every sample sign-flipped (`ξ → -ξ`).
    pub fn negated(&self) -> NoisePath {
        NoisePath {
            values: self.values.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }
}

/// Random generator for substream `stream` of root seed `seed`.
pub fn substream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a root seed with an index into a fresh root seed (splitmix64
/// finalizer). Used to give sweep points unrelated ensembles.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Exact one-step transition of the OU process jointly with its step integral.
#[derive(Debug, Clone)]
struct OuStepper {
    dt: f64,
    decay: f64,
    /// Coefficient of the current value in the step integral.
    integral_drift: f64,
    point_sd: f64,
    cross: f64,
    integral_sd: f64,
    current: f64,
}

impl OuStepper {
    fn new(tau: f64, dt: f64, rng: &mut ChaCha8Rng) -> Self {
        let var = 0.5 / tau;
        let x = dt / tau;
        let decay = (-x).exp();
        let one_minus = -(-x).exp_m1();
        let var_point = -var * (-2.0 * x).exp_m1();
        let cov = var * tau * one_minus * one_minus;
        let var_integral = var * tau * tau * integral_variance_factor(x);
        let point_sd = var_point.sqrt();
        let cross = if point_sd > 0.0 { cov / point_sd } else { 0.0 };
        let integral_sd = (var_integral - cross * cross).max(0.0).sqrt();
        let z: f64 = StandardNormal.sample(rng);
        Self {
            dt,
            decay,
            integral_drift: tau * one_minus,
            point_sd,
            cross,
            integral_sd,
            current: var.sqrt() * z,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let integral = self.integral_drift * self.current + self.cross * z1 + self.integral_sd * z2;
        self.current = self.decay * self.current + self.point_sd * z1;
        integral / self.dt
    }
}

/// `2x - 3 + 4e^{-x} - e^{-2x}`, the conditional variance of the OU step
/// integral in units of `Var·τ²`. Series form for small `x` avoids the
/// cancellation between the leading terms.
fn integral_variance_factor(x: f64) -> f64 {
    if x > 0.5 {
        return 2.0 * x - 3.0 + 4.0 * (-x).exp() - (-2.0 * x).exp();
    }
    // Σ_{k≥3} (4(-1)^k - (-2)^k) x^k / k!
    let mut sum = 0.0;
    let mut xk_over_fact = x * x / 2.0;
    let mut sign = 1.0;
    let mut pow2 = 4.0;
    for k in 3..40 {
        xk_over_fact *= x / k as f64;
        sign = -sign;
        pow2 *= 2.0;
        let coef = 4.0 * sign - sign * pow2;
        let term = coef * xk_over_fact;
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

#[derive(Debug, Clone)]
enum Source {
    White { scale: f64 },
    Ou(OuStepper),
    Constant(f64),
}

/// Unbounded stream of field samples; [`NoisePath`] is a finite prefix of it.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    source: Source,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(kind: &NoiseKind, dt: f64, seed: u64, stream: u64) -> Result<Self> {
        kind.validate()?;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::param("dt", format!("must be positive, got {dt}")));
        }
        let mut rng = substream_rng(seed, stream);
        let source = match *kind {
            NoiseKind::WhiteNoise => Source::White {
                scale: dt.sqrt().recip(),
            },
            NoiseKind::OrnsteinUhlenbeck { tau_t } => Source::Ou(OuStepper::new(tau_t, dt, &mut rng)),
            NoiseKind::ConstantField { xi } => Source::Constant(xi),
        };
        Ok(Self { source, rng })
    }

    #[inline]
    pub fn next_sample(&mut self) -> f64 {
        match &mut self.source {
            Source::White { scale } => {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                *scale * z
            }
            Source::Ou(ou) => ou.step(&mut self.rng),
            Source::Constant(xi) => *xi,
        }
    }
}

impl Iterator for NoiseStream {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.next_sample())
    }
}

/// Samples `n` values of the given kind from substream 0 of `seed`.
pub fn sample_path(kind: &NoiseKind, dt: f64, n: usize, seed: u64) -> Result<NoisePath> {
    if n == 0 {
        return Err(Error::param("n", "noise path needs at least one sample"));
    }
    if kind.is_under_resolved(dt) {
        log::warn!("noise under-resolved: dt = {dt} exceeds the correlation time ({kind:?})");
    }
    let values = NoiseStream::new(kind, dt, seed, 0)?.take(n).collect();
    Ok(NoisePath {
        kind: *kind,
        dt,
        seed,
        values,
    })
}

/// White noise with `Var(ξ_k) = 1/dt`.
pub fn sample_white(dt: f64, n: usize, seed: u64) -> Result<NoisePath> {
    sample_path(&NoiseKind::WhiteNoise, dt, n, seed)
}

/// Stationary Ornstein–Uhlenbeck field with correlation time `tau_t`.
///
/// `dt > tau_t` is allowed (the transition is exact) but logged as under-resolved.
pub fn sample_ou(dt: f64, n: usize, tau_t: f64, seed: u64) -> Result<NoisePath> {
    if n < 2 {
        return Err(Error::param("n", "OU path needs at least two samples"));
    }
    sample_path(&NoiseKind::OrnsteinUhlenbeck { tau_t }, dt, n, seed)
}

/// Frozen field `ξ(t) = xi`. The grid step is irrelevant and recorded as 1.
pub fn sample_constant(xi: f64, n: usize) -> Result<NoisePath> {
    sample_path(&NoiseKind::ConstantField { xi }, 1.0, n, 0)
}

/// Sample autocovariance at `lag` after removing the path mean,
/// normalized by the number of overlapping pairs.
pub fn autocorrelation(path: &NoisePath, lag: usize) -> Result<f64> {
    let n = path.values.len();
    if lag >= n {
        return Err(Error::param("lag", format!("lag {lag} must be below path length {n}")));
    }
    let mean = path.values.iter().sum::<f64>() / n as f64;
    let pairs = n - lag;
    let sum: f64 = path.values[..pairs]
        .iter()
        .zip(&path.values[lag..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum();
    Ok(sum / pairs as f64)
}

/// `dt · Σ_{|k| ≤ max_lag} C(k)`: the discrete integral of the autocovariance,
/// which is 1 for both white and OU paths under the conventions above.
pub fn integrated_autocovariance(path: &NoisePath, max_lag: usize) -> Result<f64> {
    let mut total = autocorrelation(path, 0)?;
    for lag in 1..=max_lag {
        total += 2.0 * autocorrelation(path, lag)?;
    }
    Ok(total * path.dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn white_noise_moments() {
        let dt = 1e-3;
        let path = sample_white(dt, 1_000_000, 7).unwrap();
        let (mean, var) = mean_var(&path.values);
        // standard error of the mean is sqrt(1/dt)/1e3 ≈ 0.0316
        assert!(mean.abs() < 4.0 * (1.0 / dt).sqrt() / 1e3, "mean {mean}");
        assert!((var / 1000.0 - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn white_noise_variance_scales_inverse_dt() {
        for (i, dt) in [1e-2, 1e-3, 1e-4].into_iter().enumerate() {
            let path = sample_white(dt, 1_000_000, 100 + i as u64).unwrap();
            let (_, var) = mean_var(&path.values);
            assert!((var * dt - 1.0).abs() < 0.02, "dt {dt}: var·dt = {}", var * dt);
        }
    }

    #[test]
    fn paths_are_deterministic_per_seed() {
        let a = sample_white(1e-3, 1000, 42).unwrap();
        let b = sample_white(1e-3, 1000, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_white(1e-3, 1000, 43).unwrap();
        assert_ne!(a.values, c.values);

        let a = sample_ou(1e-3, 1000, 0.1, 42).unwrap();
        let b = sample_ou(1e-3, 1000, 0.1, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn substreams_differ_and_are_stable() {
        let mut s0 = NoiseStream::new(&NoiseKind::WhiteNoise, 1.0, 5, 0).unwrap();
        let mut s1 = NoiseStream::new(&NoiseKind::WhiteNoise, 1.0, 5, 1).unwrap();
        let a: Vec<f64> = (0..8).map(|_| s0.next_sample()).collect();
        let b: Vec<f64> = (0..8).map(|_| s1.next_sample()).collect();
        assert_ne!(a, b);
        let again: Vec<f64> = NoiseStream::new(&NoiseKind::WhiteNoise, 1.0, 5, 1)
            .unwrap()
            .take(8)
            .collect();
        assert_eq!(b, again);
    }

    #[test]
    fn ou_lag_zero_variance() {
        let tau = 0.5;
        let path = sample_ou(1e-3, 1_000_000, tau, 3).unwrap();
        let c0 = autocorrelation(&path, 0).unwrap();
        assert!((c0 - 1.0).abs() < 0.02, "lag-0 variance {c0}");
    }

    #[test]
    fn ou_autocorrelation_decays_as_exp() {
        let dt = 1e-3;
        let tau = 0.05;
        let path = sample_ou(dt, 1_000_000, tau, 11).unwrap();
        let lag = (tau / dt).round() as usize;
        let ratio = autocorrelation(&path, lag).unwrap() / autocorrelation(&path, 0).unwrap();
        let expected = (-1.0f64).exp();
        assert!((ratio / expected - 1.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn ou_frozen_limit_is_nearly_constant() {
        // window n·dt = 1 s against τ = 10⁴ s
        let tau = 1e4;
        let path = sample_ou(1e-3, 1000, tau, 9).unwrap();
        let level = (0.5 / tau).sqrt();
        let first = path.values[0];
        let spread = path
            .values
            .iter()
            .map(|v| (v - first).abs())
            .fold(0.0, f64::max);
        assert!(spread < 0.1 * level, "spread {spread} vs stationary sd {level}");
    }

    #[test]
    fn ou_integrated_autocovariance_is_unity() {
        let dt = 1e-3;
        for (i, tau) in [0.2, 0.05, 0.01].into_iter().enumerate() {
            let path = sample_ou(dt, 1_000_000, tau, 20 + i as u64).unwrap();
            let max_lag = (8.0 * tau / dt) as usize;
            let integral = integrated_autocovariance(&path, max_lag).unwrap();
            assert!((integral - 1.0).abs() < 0.05, "tau {tau}: {integral}");
        }
    }

    #[test]
    fn ou_below_grid_resolution_approaches_white_variance() {
        let dt = 1e-3;
        let path = sample_ou(dt, 200_000, 1e-6, 4).unwrap();
        let (_, var) = mean_var(&path.values);
        assert!((var * dt - 1.0).abs() < 0.02, "var·dt {}", var * dt);
        assert!(NoiseKind::OrnsteinUhlenbeck { tau_t: 1e-6 }.is_under_resolved(dt));
    }

    #[test]
    fn constant_paths() {
        let xi = (2.0 * std::f64::consts::PI / 5.0).cos();
        let path = sample_constant(xi, 10).unwrap();
        assert_eq!(path.values.len(), 10);
        assert!(path.values.iter().all(|&v| v == xi));
        assert!((xi - 0.30902).abs() < 1e-5);
        assert!(sample_constant(0.0, 4).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(sample_constant(1.0, 4).unwrap().values.iter().all(|&v| v == 1.0));
        assert_eq!(autocorrelation(&path, 3).unwrap(), 0.0);
    }

    #[test]
    fn white_autocovariance_vanishes_beyond_lag_zero() {
        let dt = 1e-3;
        let n = 200_000;
        let path = sample_white(dt, n, 8).unwrap();
        let c0 = autocorrelation(&path, 0).unwrap();
        assert!((c0 * dt - 1.0).abs() < 0.02);
        // standard error of a lag-k estimate is Var/sqrt(n - k)
        for lag in [1, 2, 5, 50] {
            let c = autocorrelation(&path, lag).unwrap();
            assert!(c.abs() < 4.0 * c0 / ((n - lag) as f64).sqrt(), "lag {lag}: {c}");
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(sample_white(0.0, 10, 1).is_err());
        assert!(sample_white(1e-3, 0, 1).is_err());
        assert!(sample_ou(1e-3, 1, 0.1, 1).is_err());
        assert!(sample_ou(1e-3, 10, 0.0, 1).is_err());
        let path = sample_constant(0.5, 3).unwrap();
        assert!(autocorrelation(&path, 3).is_err());
    }

    #[test]
    fn integral_variance_series_matches_closed_form() {
        for x in [0.05_f64, 0.2, 0.45] {
            let direct = 2.0 * x - 3.0 + 4.0 * (-x).exp() - (-2.0 * x).exp();
            let series = integral_variance_factor(x);
            assert!((series / direct - 1.0).abs() < 1e-8, "x {x}: {series} vs {direct}");
        }
        let x = 1e-4;
        assert!((integral_variance_factor(x) / (2.0 / 3.0 * x * x * x) - 1.0).abs() < 1e-3);
    }
}
