//! Monte Carlo ensembles of collapse trajectories and the statistics run on
//! them: Born-rule z-tests, conservation of `⟨σ_z⟩` during collapse, and
//! sweeps over the coupling ratio, the noise correlation time and the
//! overall rate scale.
//!
//! Trajectory `i` draws its noise from substream `i` of the ensemble seed,
//! and trajectories are reduced in fixed-size chunks merged in index order,
//! so a result is bit-identical for any number of worker threads.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collapse::{IntegratorConfig, Outcome, PolarIntegrator, SuvParams};
use crate::error::{Error, Result};
use crate::noise::{derive_seed, NoiseKind, NoiseStream};

/// Trajectories reduced sequentially inside one parallel work item.
const CHUNK: usize = 64;

/// Significance gate, in standard errors, for every statistical check.
pub const GATE_SIGMAS: f64 = 4.0;

/// Largest tolerated fraction of trajectories that never reach a pole band.
pub const MAX_UNRESOLVED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Number of trajectories `M`.
    pub trajectories: usize,
    pub theta0: f64,
    pub params: SuvParams,
    pub noise: NoiseKind,
    pub integrator: IntegratorConfig,
    pub seed: u64,
    /// Integration steps between points of the recorded `⟨σ_z⟩` series.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    100
}

impl EnsembleConfig {
    pub fn new(trajectories: usize, theta0: f64, params: SuvParams, noise: NoiseKind, seed: u64) -> Self {
        Self {
            trajectories,
            theta0,
            params,
            noise,
            integrator: IntegratorConfig::default(),
            seed,
            record_every: default_record_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0 {
            return Err(Error::param("trajectories", "need at least one trajectory"));
        }
        if !(0.0..=PI).contains(&self.theta0) {
            return Err(Error::param("theta0", format!("{} outside [0, π]", self.theta0)));
        }
        if self.record_every == 0 {
            return Err(Error::param("record_every", "must be at least 1"));
        }
        self.params.validate()?;
        self.noise.validate()?;
        self.integrator.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub count_pole0: usize,
    pub count_pole1: usize,
    pub count_unresolved: usize,
    /// Collapse times of resolved trajectories, in trajectory order.
    pub collapse_times: Vec<f64>,
    pub series_times: Vec<f64>,
    /// Ensemble mean of `⟨σ_z⟩`; absorbed trajectories contribute their
    /// pole value `±1` at every later time.
    pub mean_sigma_z_series: Vec<f64>,
    /// Standard error of the mean at each recorded time.
    pub stderr_series: Vec<f64>,
    pub config_echo: EnsembleConfig,
}

impl EnsembleResult {
    pub fn trajectories(&self) -> usize {
        self.count_pole0 + self.count_pole1 + self.count_unresolved
    }

    /// Fraction of resolved trajectories that ended at `|0⟩`.
    pub fn empirical_p0(&self) -> f64 {
        let resolved = self.count_pole0 + self.count_pole1;
        if resolved == 0 {
            f64::NAN
        } else {
            self.count_pole0 as f64 / resolved as f64
        }
    }

    pub fn unresolved_fraction(&self) -> f64 {
        self.count_unresolved as f64 / self.trajectories() as f64
    }
}

#[derive(Debug, Clone)]
struct ChunkTally {
    pole0: usize,
    pole1: usize,
    unresolved: usize,
    collapse_times: Vec<f64>,
    sum_z: Vec<f64>,
    sum_z2: Vec<f64>,
    absorbed_pole0: Vec<u32>,
    absorbed_pole1: Vec<u32>,
}

impl ChunkTally {
    fn new(points: usize) -> Self {
        Self {
            pole0: 0,
            pole1: 0,
            unresolved: 0,
            collapse_times: Vec::new(),
            sum_z: vec![0.0; points],
            sum_z2: vec![0.0; points],
            absorbed_pole0: vec![0; points],
            absorbed_pole1: vec![0; points],
        }
    }

    fn merge(&mut self, other: ChunkTally) {
        self.pole0 += other.pole0;
        self.pole1 += other.pole1;
        self.unresolved += other.unresolved;
        self.collapse_times.extend(other.collapse_times);
        for k in 0..self.sum_z.len() {
            self.sum_z[k] += other.sum_z[k];
            self.sum_z2[k] += other.sum_z2[k];
            self.absorbed_pole0[k] += other.absorbed_pole0[k];
            self.absorbed_pole1[k] += other.absorbed_pole1[k];
        }
    }
}

/// Runs `M` independent trajectories from `θ₀`.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<EnsembleResult> {
    cfg.validate()?;
    let integrator = PolarIntegrator::new(&cfg.params, &cfg.integrator)?;
    let dt = cfg.integrator.dt;
    let n_steps = cfg.integrator.n_steps();
    let stride = cfg.record_every;
    let points = n_steps / stride + 1;
    if cfg.noise.is_under_resolved(dt) {
        log::warn!("ensemble noise under-resolved: dt = {dt} exceeds the correlation time");
    }

    let n_chunks = cfg.trajectories.div_ceil(CHUNK);
    let tallies: Vec<ChunkTally> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut tally = ChunkTally::new(points);
            let first = chunk * CHUNK;
            let last = (first + CHUNK).min(cfg.trajectories);
            for index in first..last {
                let mut noise = NoiseStream::new(&cfg.noise, dt, cfg.seed, index as u64)?;
                let mut next_record = 0;
                let run = integrator
                    .run(
                        cfg.theta0,
                        n_steps,
                        || noise.next_sample(),
                        |step, point| {
                            if step == next_record {
                                let z = point.sigma_z();
                                let k = step / stride;
                                tally.sum_z[k] += z;
                                tally.sum_z2[k] += z * z;
                                next_record += stride;
                            }
                        },
                    )
                    .map_err(|e| Error::Trajectory {
                        index,
                        source: Box::new(e),
                    })?;
                match (run.outcome, run.collapse_step) {
                    (Outcome::Unresolved, _) | (_, None) => tally.unresolved += 1,
                    (outcome, Some(step)) => {
                        tally.collapse_times.push(step as f64 * dt);
                        let k = step / stride + 1;
                        if outcome == Outcome::Pole0 {
                            tally.pole0 += 1;
                            if k < points {
                                tally.absorbed_pole0[k] += 1;
                            }
                        } else {
                            tally.pole1 += 1;
                            if k < points {
                                tally.absorbed_pole1[k] += 1;
                            }
                        }
                    }
                }
            }
            Ok(tally)
        })
        .collect::<Result<_>>()?;

    let mut total = ChunkTally::new(points);
    for tally in tallies {
        total.merge(tally);
    }

    let m = cfg.trajectories as f64;
    let mut mean = Vec::with_capacity(points);
    let mut stderr = Vec::with_capacity(points);
    let (mut up, mut down) = (0u64, 0u64);
    for k in 0..points {
        up += total.absorbed_pole0[k] as u64;
        down += total.absorbed_pole1[k] as u64;
        let s1 = total.sum_z[k] + up as f64 - down as f64;
        let s2 = total.sum_z2[k] + (up + down) as f64;
        let mu = (s1 / m).clamp(-1.0, 1.0);
        let var = (s2 / m - mu * mu).max(0.0);
        mean.push(mu);
        stderr.push((var / m).sqrt());
    }

    Ok(EnsembleResult {
        count_pole0: total.pole0,
        count_pole1: total.pole1,
        count_unresolved: total.unresolved,
        collapse_times: total.collapse_times,
        series_times: (0..points).map(|k| (k * stride) as f64 * dt).collect(),
        mean_sigma_z_series: mean,
        stderr_series: stderr,
        config_echo: *cfg,
    })
}

/// Binomial z-test of the `|0⟩` frequency against `cos²(θ₀/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BornTest {
    pub expected_p0: f64,
    pub empirical_p0: f64,
    pub z_score: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn born_statistics_test(r: &EnsembleResult) -> Result<BornTest> {
    if r.unresolved_fraction() >= MAX_UNRESOLVED_FRACTION {
        return Err(Error::HorizonTooShort {
            unresolved: r.count_unresolved,
            total: r.trajectories(),
        });
    }
    let expected = (0.5 * r.config_echo.theta0).cos().powi(2);
    let empirical = r.empirical_p0();
    let se = (expected * (1.0 - expected) / r.trajectories() as f64).sqrt();
    let z_score = binomial_z(empirical, expected, se);
    Ok(BornTest {
        expected_p0: expected,
        empirical_p0: empirical,
        z_score,
        threshold: GATE_SIGMAS,
        pass: z_score.abs() < GATE_SIGMAS,
    })
}

fn binomial_z(empirical: f64, expected: f64, se: f64) -> f64 {
    let diff = empirical - expected;
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// `max_t |mean⟨σ_z⟩(t) - cos θ₀|`.
pub fn martingale_check(r: &EnsembleResult) -> f64 {
    let target = r.config_echo.theta0.cos();
    r.mean_sigma_z_series
        .iter()
        .map(|m| (m - target).abs())
        .fold(0.0, f64::max)
}

/// Largest `|mean⟨σ_z⟩(t) - cos θ₀|` in units of the standard error at the
/// same time. Points with zero spread must match exactly, else the result
/// is infinite.
pub fn martingale_max_z(r: &EnsembleResult) -> f64 {
    let target = r.config_echo.theta0.cos();
    r.mean_sigma_z_series
        .iter()
        .zip(&r.stderr_series)
        .map(|(m, se)| {
            let dev = (m - target).abs();
            if *se > 0.0 {
                dev / se
            } else if dev < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// Four standard errors of the ensemble mean of `⟨σ_z⟩` once fully
/// collapsed, `4·√((1 - cos²θ₀)/M)`. For a martingale bounded by ±1 the
/// variance never exceeds this end-point value.
pub fn martingale_bound(theta0: f64, trajectories: usize) -> f64 {
    let c = theta0.cos();
    GATE_SIGMAS * ((1.0 - c * c) / trajectories as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GjRow {
    pub ratio: f64,
    pub empirical_p0: f64,
    pub unresolved: usize,
}

/// One ensemble per ratio with `G = ratio · J`.
pub fn gj_ratio_sweep(ratios: &[f64], theta0: f64, base: &EnsembleConfig) -> Result<Vec<GjRow>> {
    ratios
        .iter()
        .enumerate()
        .map(|(i, &ratio)| {
            if !(ratio > 0.0) {
                return Err(Error::param("ratios", format!("must be positive, got {ratio}")));
            }
            let cfg = EnsembleConfig {
                theta0,
                params: base.params.with_g_over_j(ratio),
                seed: derive_seed(base.seed, i as u64),
                ..*base
            };
            let r = run_ensemble(&cfg)?;
            Ok(GjRow {
                ratio,
                empirical_p0: r.empirical_p0(),
                unresolved: r.count_unresolved,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau_t: f64,
    pub empirical_p0: f64,
    /// Signed deviation from `cos²(θ₀/2)` in binomial standard errors.
    pub born_deviation_sigma: f64,
}

/// One ensemble per correlation time under Ornstein–Uhlenbeck noise.
pub fn tau_sweep(tau_values: &[f64], theta0: f64, base: &EnsembleConfig) -> Result<Vec<TauRow>> {
    tau_values
        .iter()
        .enumerate()
        .map(|(i, &tau_t)| {
            let cfg = EnsembleConfig {
                theta0,
                noise: NoiseKind::OrnsteinUhlenbeck { tau_t },
                seed: derive_seed(base.seed, i as u64),
                ..*base
            };
            let r = run_ensemble(&cfg)?;
            let test = born_statistics_test(&r)?;
            Ok(TauRow {
                tau_t,
                empirical_p0: test.empirical_p0,
                born_deviation_sigma: test.z_score,
            })
        })
        .collect()
}

/// Probability of ending at `|0⟩` when the field is frozen at a draw from
/// the stationary OU law `N(0, 1/(2τ))`: the state flows to `|0⟩` exactly
/// when `θ₀ < arccos((G/J)ξ)`, i.e. `ξ < (J/G) cos θ₀`.
///
/// Evaluated by composite Simpson quadrature of the Gaussian density, with
/// no reference to the trajectory integrator.
pub fn frozen_noise_p0(theta0: f64, tau_t: f64, j: f64, g: f64) -> f64 {
    let c = theta0.cos();
    if g == 0.0 {
        return if c > 0.0 { 1.0 } else { 0.0 };
    }
    let sd = (0.5 / tau_t).sqrt();
    let threshold = j / g * c;
    let lo = -12.0 * sd;
    let hi = threshold.min(12.0 * sd);
    if hi <= lo {
        return 0.0;
    }
    let density = |x: f64| (-(x * x) / (2.0 * sd * sd)).exp() / (sd * (2.0 * PI).sqrt());
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let mut sum = density(lo) + density(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * density(lo + i as f64 * h);
    }
    (sum * h / 3.0).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub scale: f64,
    /// `ε𝒩` after scaling.
    pub epsilon_n: f64,
    pub median_collapse_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `ln τ_c` against `ln ε𝒩`.
    pub slope: f64,
}

/// Median collapse time as `ε` is multiplied by each scale factor.
///
/// With `G = 0` the dynamics are deterministic; otherwise `G/J` stays fixed
/// while both effective rates scale together.
pub fn scaling_sweep(rate_scales: &[f64], theta0: f64, base: &EnsembleConfig) -> Result<ScalingReport> {
    if rate_scales.len() < 2 {
        return Err(Error::param("rate_scales", "need at least two scales for a slope"));
    }
    if base.params.g == 0.0 && (theta0 - PI / 2.0).abs() < 1e-12 {
        return Err(Error::param(
            "theta0",
            "deterministic collapse never leaves the equator θ₀ = π/2",
        ));
    }
    let mut rows = Vec::with_capacity(rate_scales.len());
    for (i, &scale) in rate_scales.iter().enumerate() {
        if !(scale > 0.0) {
            return Err(Error::param("rate_scales", format!("must be positive, got {scale}")));
        }
        let params = SuvParams {
            epsilon: base.params.epsilon * scale,
            ..base.params
        };
        let cfg = EnsembleConfig {
            theta0,
            params,
            seed: derive_seed(base.seed, i as u64),
            ..*base
        };
        let r = run_ensemble(&cfg)?;
        let median = median_collapse_time(&r).ok_or(Error::HorizonTooShort {
            unresolved: r.count_unresolved,
            total: r.trajectories(),
        })?;
        rows.push(ScalingRow {
            scale,
            epsilon_n: params.epsilon * params.n_order,
            median_collapse_time: median,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.epsilon_n.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median_collapse_time.ln()).collect();
    Ok(ScalingReport {
        slope: least_squares_slope(&xs, &ys),
        rows,
    })
}

/// Median over all trajectories, counting unresolved ones as infinitely
/// slow; `None` when that median is not finite.
pub fn median_collapse_time(r: &EnsembleResult) -> Option<f64> {
    let mut times = r.collapse_times.clone();
    times.extend(std::iter::repeat_n(f64::INFINITY, r.count_unresolved));
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    median.is_finite().then_some(median)
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
