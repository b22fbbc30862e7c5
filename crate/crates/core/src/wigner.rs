//! Wigner quasi-probability functions for the centre of mass of a harmonic
//! crystal under the SUV Hamiltonian `P²/2m + iε𝒩(X - x₀)²`.
//!
//! Phase space is the 1-D pair `(X, P)` sampled on a uniform node grid,
//! stored row-major with momentum as the slow index:
//! `values[ip * nx + ix] = W(x_ix, p_ip)`.
//!
//! Transport follows
//!
//! ```text
//! ∂W/∂t = 2κ(X - x₀) ∂W/∂P - (P/m) ∂W/∂X
//! ```
//!
//! with `κ = iε𝒩` ([`WignerMode::AsWrittenComplex`]) or `κ = ε𝒩`
//! ([`WignerMode::RealEffective`]). The real reading is a classical harmonic
//! force with spring constant `2ε𝒩`, so phase space rotates rigidly at
//! `ω = √(2ε𝒩/m)`. The imaginary reading turns the momentum term into an
//! ill-posed backward-diffusion-like operator and the field grows; that is
//! reported rather than suppressed.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admitted Courant number along either axis.
pub const CFL_LIMIT: f64 = 0.8;

/// Relative change of `∬W` beyond which the grid is flagged as too small.
pub const MASS_DRIFT_WARNING: f64 = 1e-3;

const MIN_POINTS: usize = 16;
const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub np: usize,
}

impl PhaseGrid {
    pub fn new(x_min: f64, x_max: f64, nx: usize, p_min: f64, p_max: f64, np: usize) -> Result<Self> {
        let grid = Self {
            x_min,
            x_max,
            nx,
            p_min,
            p_max,
            np,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < MIN_POINTS || self.np < MIN_POINTS {
            return Err(Error::param(
                "grid",
                format!("need at least {MIN_POINTS} points per axis, got {}×{}", self.nx, self.np),
            ));
        }
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_min < self.x_max) {
            return Err(Error::param("grid", "position bounds must be finite and ordered"));
        }
        if !(self.p_min.is_finite() && self.p_max.is_finite() && self.p_min < self.p_max) {
            return Err(Error::param("grid", "momentum bounds must be finite and ordered"));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dp(&self) -> f64 {
        (self.p_max - self.p_min) / (self.np - 1) as f64
    }

    pub fn x(&self, ix: usize) -> f64 {
        self.x_min + ix as f64 * self.dx()
    }

    pub fn p(&self, ip: usize) -> f64 {
        self.p_min + ip as f64 * self.dp()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn ps(&self) -> Vec<f64> {
        (0..self.np).map(|i| self.p(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.nx * self.np
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WignerField {
    pub grid: PhaseGrid,
    pub values: Vec<Complex64>,
    pub time: f64,
    pub hbar: f64,
}

impl WignerField {
    pub fn zeros(grid: PhaseGrid, hbar: f64) -> Self {
        Self {
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
            grid,
            time: 0.0,
            hbar,
        }
    }

    pub fn at(&self, ix: usize, ip: usize) -> Complex64 {
        self.values[ip * self.grid.nx + ix]
    }

    /// Trapezoidal `∬W dx dp`.
    pub fn total(&self) -> Complex64 {
        let (wx, wp) = trapezoid_weights(&self.grid);
        let mut sum = Complex64::new(0.0, 0.0);
        for (ip, row) in self.values.chunks_exact(self.grid.nx).enumerate() {
            let row_sum: Complex64 = row.iter().zip(&wx).map(|(w, c)| w * c).sum();
            sum += row_sum * wp[ip];
        }
        sum
    }

    pub fn max_imag(&self) -> f64 {
        self.values.iter().map(|w| w.im.abs()).fold(0.0, f64::max)
    }
}

fn trapezoid_weights(grid: &PhaseGrid) -> (Vec<f64>, Vec<f64>) {
    let weights = |n: usize, h: f64| {
        let mut w = vec![h; n];
        w[0] *= 0.5;
        w[n - 1] *= 0.5;
        w
    };
    (weights(grid.nx, grid.dx()), weights(grid.np, grid.dp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrystalParams {
    pub m_tot: f64,
    pub epsilon: f64,
    #[serde(rename = "N_order")]
    pub n_order: f64,
    pub x0: f64,
}

impl Default for CrystalParams {
    fn default() -> Self {
        Self {
            m_tot: 1.0,
            epsilon: 0.0,
            n_order: 1.0,
            x0: 0.0,
        }
    }
}

impl CrystalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_tot > 0.0 && self.m_tot.is_finite()) {
            return Err(Error::param("m_tot", format!("must be positive, got {}", self.m_tot)));
        }
        if !(self.n_order >= 1.0 && self.n_order.is_finite()) {
            return Err(Error::param("N_order", format!("must be at least 1, got {}", self.n_order)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param("epsilon", format!("must be non-negative, got {}", self.epsilon)));
        }
        if !self.x0.is_finite() {
            return Err(Error::param("x0", "must be finite"));
        }
        Ok(())
    }

    /// `ε𝒩`.
    pub fn coupling(&self) -> f64 {
        self.epsilon * self.n_order
    }

    /// Angular frequency of the real effective harmonic force.
    pub fn effective_omega(&self) -> f64 {
        (2.0 * self.coupling() / self.m_tot).sqrt()
    }
}

/// Wigner transform of a pure state sampled on the grid's position axis,
///
/// `W(x, p) = (1/2πℏ) ∫ e^{-ipy/ℏ} ψ(x + y/2) ψ*(x - y/2) dy`,
///
/// evaluated with `y = 2m·dx` so that both arguments stay on grid nodes.
/// Samples beyond the grid are taken as zero.
pub fn compute_wigner(psi: &[Complex64], grid: &PhaseGrid, hbar: f64) -> Result<WignerField> {
    grid.validate()?;
    check_hbar(hbar)?;
    if psi.len() != grid.nx {
        return Err(Error::param(
            "psi",
            format!("{} samples for a grid with nx = {}", psi.len(), grid.nx),
        ));
    }
    let dx = grid.dx();
    let norm: f64 = psi.iter().map(|c| c.norm_sqr()).sum::<f64>() * dx;
    if (norm - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Normalization { norm });
    }
    // The kernel has period πℏ/dx in p; the grid must fit inside one period.
    let nyquist = PI * hbar / (2.0 * dx);
    if grid.p_min.abs().max(grid.p_max.abs()) > nyquist {
        return Err(Error::param(
            "grid",
            format!("momentum range exceeds the resolvable bound ±{nyquist:.4} for this dx"),
        ));
    }

    let nx = grid.nx;
    let max_lag = nx / 2 + 1;
    let ps = grid.ps();
    // e^{-2ipm·dx/ℏ} for every momentum row and lag
    let mut phases = Vec::with_capacity(grid.np * max_lag);
    for &p in &ps {
        let k = 2.0 * p * dx / hbar;
        phases.extend((0..max_lag).map(|m| Complex64::from_polar(1.0, -k * m as f64)));
    }

    let mut field = WignerField::zeros(*grid, hbar);
    let scale = dx / (PI * hbar);
    let mut corr = vec![Complex64::new(0.0, 0.0); max_lag];
    for ix in 0..nx {
        let reach = ix.min(nx - 1 - ix);
        for (m, c) in corr.iter_mut().enumerate() {
            *c = if m <= reach {
                psi[ix + m] * psi[ix - m].conj()
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        for ip in 0..grid.np {
            let ph = &phases[ip * max_lag..(ip + 1) * max_lag];
            // lags ±m are complex conjugates, so the sum is real
            let mut w = corr[0].re;
            for m in 1..=reach {
                w += 2.0 * (corr[m] * ph[m]).re;
            }
            field.values[ip * nx + ix] = Complex64::new(scale * w, 0.0);
        }
    }
    Ok(field)
}

/// Normalized product Gaussian
/// `exp(-(x-x̄)²/2σx² - (p-p̄)²/2σp²) / (2πσxσp)`.
pub fn gaussian_wigner(
    x_mean: f64,
    p_mean: f64,
    sigma_x: f64,
    sigma_p: f64,
    grid: &PhaseGrid,
    hbar: f64,
) -> Result<WignerField> {
    grid.validate()?;
    check_hbar(hbar)?;
    if !(sigma_x > 0.0 && sigma_p > 0.0) {
        return Err(Error::InvalidState(format!(
            "Gaussian widths must be positive, got σx = {sigma_x}, σp = {sigma_p}"
        )));
    }
    if sigma_x * sigma_p < 0.5 * hbar * (1.0 - 1e-12) {
        return Err(Error::InvalidState(format!(
            "σx·σp = {} is below ℏ/2 = {}",
            sigma_x * sigma_p,
            0.5 * hbar
        )));
    }
    let mut field = WignerField::zeros(*grid, hbar);
    let norm = 1.0 / (2.0 * PI * sigma_x * sigma_p);
    let gx: Vec<f64> = grid
        .xs()
        .iter()
        .map(|x| (-(x - x_mean).powi(2) / (2.0 * sigma_x * sigma_x)).exp())
        .collect();
    for ip in 0..grid.np {
        let gp = norm * (-(grid.p(ip) - p_mean).powi(2) / (2.0 * sigma_p * sigma_p)).exp();
        for (ix, g) in gx.iter().enumerate() {
            field.values[ip * grid.nx + ix] = Complex64::new(gp * g, 0.0);
        }
    }
    Ok(field)
}

fn check_hbar(hbar: f64) -> Result<()> {
    if hbar > 0.0 && hbar.is_finite() {
        Ok(())
    } else {
        Err(Error::param("hbar", format!("must be positive, got {hbar}")))
    }
}

/// Quantum correction series for a polynomial potential
/// `U(x) = Σ_k c_k (x - x₀)^k`, given as `[c_0, c_1, c_2, ...]`.
///
/// Every term of the series carries a potential derivative of order three
/// or more, so the result vanishes for polynomials of degree at most two.
/// Higher degrees are outside the supported scope.
pub fn quantum_correction(potential: &[f64], field: &WignerField) -> Result<WignerField> {
    let degree = potential.iter().rposition(|&c| c != 0.0).unwrap_or(0);
    if degree > 2 {
        return Err(Error::UnsupportedPotential { degree });
    }
    let mut zero = WignerField::zeros(field.grid, field.hbar);
    zero.time = field.time;
    Ok(zero)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WignerMode {
    AsWrittenComplex,
    #[default]
    RealEffective,
}

/// Spatial discretization of the transport terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Advection {
    Upwind1,
    /// Third-order upwind-biased four-point stencil.
    #[default]
    Upwind3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveOptions {
    pub dt: f64,
    pub steps: usize,
    #[serde(default)]
    pub mode: WignerMode,
    #[serde(default)]
    pub advection: Advection,
    /// Rescale so `∬W` keeps its initial value after every step.
    #[serde(default)]
    pub renormalize: bool,
}

impl EvolveOptions {
    pub fn new(dt: f64, steps: usize, mode: WignerMode) -> Self {
        Self {
            dt,
            steps,
            mode,
            advection: Advection::default(),
            renormalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveReport {
    pub field: WignerField,
    pub initial_total: Complex64,
    pub final_total: Complex64,
    /// `|∬W(t) - ∬W(0)| / |∬W(0)|` at the end of the run.
    pub relative_mass_drift: f64,
    pub grid_too_small: bool,
}

/// Evolves with the default stencil and no renormalization.
pub fn evolve_wigner(
    field: &WignerField,
    params: &CrystalParams,
    dt: f64,
    steps: usize,
    mode: WignerMode,
) -> Result<WignerField> {
    Ok(evolve_wigner_with(field, params, &EvolveOptions::new(dt, steps, mode))?.field)
}

pub fn evolve_wigner_with(
    field: &WignerField,
    params: &CrystalParams,
    opts: &EvolveOptions,
) -> Result<EvolveReport> {
    params.validate()?;
    field.grid.validate()?;
    if field.values.len() != field.grid.len() {
        return Err(Error::param("field", "value count does not match the grid"));
    }
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(Error::param("dt", format!("must be positive, got {}", opts.dt)));
    }
    let transport = Transport::new(&field.grid, params, opts)?;

    let initial_total = field.total();
    let mut u = field.values.clone();
    let mut stage = vec![Complex64::new(0.0, 0.0); u.len()];
    let mut rate = vec![Complex64::new(0.0, 0.0); u.len()];
    let dt = opts.dt;
    for _ in 0..opts.steps {
        // SSP-RK3
        transport.rhs(&u, &mut rate);
        for ((s, &a), &r) in stage.iter_mut().zip(&u).zip(&rate) {
            *s = a + r * dt;
        }
        transport.rhs(&stage, &mut rate);
        for ((s, &a), &r) in stage.iter_mut().zip(&u).zip(&rate) {
            *s = a * 0.75 + (*s + r * dt) * 0.25;
        }
        transport.rhs(&stage, &mut rate);
        for ((a, &s), &r) in u.iter_mut().zip(&stage).zip(&rate) {
            *a = *a * (1.0 / 3.0) + (s + r * dt) * (2.0 / 3.0);
        }
        if opts.renormalize {
            let now = total_of(&field.grid, &u);
            if now.norm() > 0.0 {
                let k = initial_total / now;
                u.iter_mut().for_each(|w| *w *= k);
            }
        }
    }

    let out = WignerField {
        grid: field.grid,
        values: u,
        time: field.time + dt * opts.steps as f64,
        hbar: field.hbar,
    };
    let final_total = out.total();
    let drift = if initial_total.norm() > 0.0 {
        (final_total - initial_total).norm() / initial_total.norm()
    } else {
        final_total.norm()
    };
    let grid_too_small = drift > MASS_DRIFT_WARNING;
    if grid_too_small {
        log::warn!("∬W changed by {drift:.3e} of its initial value; the grid may be too small");
    }
    Ok(EvolveReport {
        field: out,
        initial_total,
        final_total,
        relative_mass_drift: drift,
        grid_too_small,
    })
}

fn total_of(grid: &PhaseGrid, values: &[Complex64]) -> Complex64 {
    let (wx, wp) = trapezoid_weights(grid);
    values
        .chunks_exact(grid.nx)
        .zip(&wp)
        .map(|(row, w)| row.iter().zip(&wx).map(|(v, c)| v * c).sum::<Complex64>() * *w)
        .sum()
}

#[derive(Debug, Clone, Copy)]
enum Bias {
    /// Information arrives from lower indices (positive speed).
    Lower,
    Upper,
    Central,
}

fn derivative(pad: &[Complex64], i: usize, bias: Bias, advection: Advection) -> Complex64 {
    // `pad` carries two zero cells on each side; node k sits at pad[k + 2]
    let (m2, m1, c, p1, p2) = (pad[i], pad[i + 1], pad[i + 2], pad[i + 3], pad[i + 4]);
    match (advection, bias) {
        (Advection::Upwind1, Bias::Lower) => c - m1,
        (Advection::Upwind1, Bias::Upper) => p1 - c,
        (Advection::Upwind1, Bias::Central) => (p1 - m1) * 0.5,
        (Advection::Upwind3, Bias::Lower) => (p1 * 2.0 + c * 3.0 - m1 * 6.0 + m2) / 6.0,
        (Advection::Upwind3, Bias::Upper) => (-p2 + p1 * 6.0 - c * 3.0 - m1 * 2.0) / 6.0,
        (Advection::Upwind3, Bias::Central) => (-p2 + p1 * 8.0 - m1 * 8.0 + m2) / 12.0,
    }
}

struct Transport {
    grid: PhaseGrid,
    advection: Advection,
    /// `v_x = p/m` per momentum row.
    row_speed: Vec<f64>,
    /// `v_p` per position column; `None` when `ε𝒩 = 0`.
    column_speed: Option<ColumnSpeed>,
}

enum ColumnSpeed {
    Real(Vec<f64>),
    Imaginary(Vec<f64>),
}

impl Transport {
    fn new(grid: &PhaseGrid, params: &CrystalParams, opts: &EvolveOptions) -> Result<Self> {
        let row_speed: Vec<f64> = grid.ps().iter().map(|p| p / params.m_tot).collect();
        let vx_max = row_speed.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let courant_x = vx_max * opts.dt / grid.dx();
        if courant_x > CFL_LIMIT {
            return Err(Error::CflViolation {
                axis: "x",
                courant: courant_x,
                limit: CFL_LIMIT,
            });
        }
        let coupling = params.coupling();
        let column_speed = if coupling == 0.0 {
            None
        } else {
            let speeds: Vec<f64> = grid
                .xs()
                .iter()
                .map(|x| -2.0 * coupling * (x - params.x0))
                .collect();
            let vp_max = speeds.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let courant_p = vp_max * opts.dt / grid.dp();
            if courant_p > CFL_LIMIT {
                return Err(Error::CflViolation {
                    axis: "p",
                    courant: courant_p,
                    limit: CFL_LIMIT,
                });
            }
            Some(match opts.mode {
                WignerMode::RealEffective => ColumnSpeed::Real(speeds),
                WignerMode::AsWrittenComplex => ColumnSpeed::Imaginary(speeds),
            })
        };
        Ok(Self {
            grid: *grid,
            advection: opts.advection,
            row_speed,
            column_speed,
        })
    }

    /// `out = -v_x ∂_x u - v_p ∂_p u` with zero values outside the grid.
    fn rhs(&self, u: &[Complex64], out: &mut [Complex64]) {
        let (nx, np) = (self.grid.nx, self.grid.np);
        let zero = Complex64::new(0.0, 0.0);
        let inv_dx = 1.0 / self.grid.dx();
        let mut pad = vec![zero; nx.max(np) + 4];

        for ip in 0..np {
            let v = self.row_speed[ip];
            let row = &mut out[ip * nx..(ip + 1) * nx];
            if v == 0.0 {
                row.fill(zero);
                continue;
            }
            pad[2..nx + 2].copy_from_slice(&u[ip * nx..(ip + 1) * nx]);
            pad[nx + 2] = zero;
            pad[nx + 3] = zero;
            let bias = if v > 0.0 { Bias::Lower } else { Bias::Upper };
            let k = -v * inv_dx;
            for (ix, o) in row.iter_mut().enumerate() {
                *o = derivative(&pad, ix, bias, self.advection) * k;
            }
        }

        let Some(column_speed) = &self.column_speed else {
            return;
        };
        let inv_dp = 1.0 / self.grid.dp();
        pad[np + 2] = zero;
        pad[np + 3] = zero;
        for ix in 0..nx {
            for ip in 0..np {
                pad[ip + 2] = u[ip * nx + ix];
            }
            match column_speed {
                ColumnSpeed::Real(speeds) => {
                    let v = speeds[ix];
                    if v == 0.0 {
                        continue;
                    }
                    let bias = if v > 0.0 { Bias::Lower } else { Bias::Upper };
                    let k = -v * inv_dp;
                    for ip in 0..np {
                        out[ip * nx + ix] += derivative(&pad, ip, bias, self.advection) * k;
                    }
                }
                ColumnSpeed::Imaginary(speeds) => {
                    // no upwind direction exists for an imaginary speed
                    let k = Complex64::new(0.0, -speeds[ix] * inv_dp);
                    for ip in 0..np {
                        out[ip * nx + ix] += derivative(&pad, ip, Bias::Central, self.advection) * k;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    /// `∫ Re W dp` at each position node.
    pub position: Vec<f64>,
    /// `∫ Re W dx` at each momentum node.
    pub momentum: Vec<f64>,
    /// Largest `|Im W|` anywhere on the grid.
    pub imag_residual: f64,
}

pub fn marginals(field: &WignerField) -> Marginals {
    let grid = &field.grid;
    let (wx, wp) = trapezoid_weights(grid);
    let mut position = vec![0.0; grid.nx];
    let mut momentum = vec![0.0; grid.np];
    for (ip, row) in field.values.chunks_exact(grid.nx).enumerate() {
        for (ix, w) in row.iter().enumerate() {
            position[ix] += w.re * wp[ip];
            momentum[ip] += w.re * wx[ix];
        }
    }
    Marginals {
        position,
        momentum,
        imag_residual: field.max_imag(),
    }
}

/// Centroid and spread of `|W| / ∬|W|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub centroid_x: f64,
    pub centroid_p: f64,
    pub sigma_x: f64,
    pub sigma_p: f64,
}

pub fn localization(field: &WignerField) -> Result<Localization> {
    let grid = &field.grid;
    let (wx, wp) = trapezoid_weights(grid);
    let xs = grid.xs();
    let ps = grid.ps();
    let (mut s0, mut sx, mut sp, mut sxx, mut spp) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (ip, row) in field.values.chunks_exact(grid.nx).enumerate() {
        let p = ps[ip];
        for (ix, w) in row.iter().enumerate() {
            let a = w.norm() * wx[ix] * wp[ip];
            let x = xs[ix];
            s0 += a;
            sx += a * x;
            sp += a * p;
            sxx += a * x * x;
            spp += a * p * p;
        }
    }
    if !(s0 > 0.0) || !s0.is_finite() {
        return Err(Error::InvalidState(format!("∬|W| = {s0} is not positive")));
    }
    let (cx, cp) = (sx / s0, sp / s0);
    Ok(Localization {
        centroid_x: cx,
        centroid_p: cp,
        sigma_x: (sxx / s0 - cx * cx).max(0.0).sqrt(),
        sigma_p: (spp / s0 - cp * cp).max(0.0).sqrt(),
    })
}

/// `(σx_eff, σp_eff)` of `|W|`.
pub fn localization_widths(field: &WignerField) -> Result<(f64, f64)> {
    localization(field).map(|l| (l.sigma_x, l.sigma_p))
}

/// Variance of the position marginal, the physical `⟨(X - ⟨X⟩)²⟩`.
pub fn position_variance(field: &WignerField) -> f64 {
    weighted_variance(&field.grid.xs(), &marginals(field).position)
}

pub fn momentum_variance(field: &WignerField) -> f64 {
    weighted_variance(&field.grid.ps(), &marginals(field).momentum)
}

fn weighted_variance(nodes: &[f64], density: &[f64]) -> f64 {
    let mass: f64 = density.iter().sum();
    let mean: f64 = nodes.iter().zip(density).map(|(x, d)| x * d).sum::<f64>() / mass;
    nodes
        .iter()
        .zip(density)
        .map(|(x, d)| (x - mean).powi(2) * d)
        .sum::<f64>()
        / mass
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitOrder {
    /// `𝒩` on the outer loop, `ε` decreasing on the inner loop.
    EpsFirst,
    /// `ε` on the outer loop, `𝒩` increasing on the inner loop.
    NFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitRow {
    pub eps: f64,
    #[serde(rename = "N")]
    pub n_order: f64,
    pub sigma_x_eff: f64,
    pub sigma_p_eff: f64,
    pub centroid_x: f64,
    pub relative_mass_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitTable {
    pub order: LimitOrder,
    pub rows: Vec<LimitRow>,
    /// Field at `t_end` for the last row.
    pub endpoint: WignerField,
}

/// Evolves `field0` to `t_end` in real effective mode for every `(ε, 𝒩)`
/// pair, nesting the loops according to `order`. The last row is the limit
/// endpoint. Each run uses the largest step not exceeding `dt` that both
/// divides `t_end` and satisfies the CFL bound.
pub fn limit_experiment(
    order: LimitOrder,
    eps_sequence: &[f64],
    n_sequence: &[f64],
    base: &CrystalParams,
    field0: &WignerField,
    dt: f64,
    t_end: f64,
) -> Result<LimitTable> {
    if eps_sequence.is_empty() || n_sequence.is_empty() {
        return Err(Error::param("sequences", "need at least one ε and one 𝒩"));
    }
    if eps_sequence.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::param("eps_sequence", "must be non-increasing"));
    }
    if n_sequence.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::param("n_sequence", "must be non-decreasing"));
    }
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::param("dt", "dt must be positive and t_end non-negative"));
    }

    let pairs: Vec<(f64, f64)> = match order {
        LimitOrder::EpsFirst => n_sequence
            .iter()
            .flat_map(|&n| eps_sequence.iter().map(move |&e| (e, n)))
            .collect(),
        LimitOrder::NFirst => eps_sequence
            .iter()
            .flat_map(|&e| n_sequence.iter().map(move |&n| (e, n)))
            .collect(),
    };

    let mut rows = Vec::with_capacity(pairs.len());
    let mut endpoint = field0.clone();
    for (eps, n_order) in pairs {
        let params = CrystalParams {
            epsilon: eps,
            n_order,
            ..*base
        };
        params.validate()?;
        let step = stable_step(&field0.grid, &params, dt);
        let steps = (t_end / step).ceil() as usize;
        let opts = EvolveOptions {
            dt: if steps == 0 { dt } else { t_end / steps as f64 },
            steps,
            mode: WignerMode::RealEffective,
            advection: Advection::default(),
            renormalize: false,
        };
        let report = evolve_wigner_with(field0, &params, &opts)?;
        let loc = localization(&report.field)?;
        rows.push(LimitRow {
            eps,
            n_order,
            sigma_x_eff: loc.sigma_x,
            sigma_p_eff: loc.sigma_p,
            centroid_x: loc.centroid_x,
            relative_mass_drift: report.relative_mass_drift,
        });
        endpoint = report.field;
    }
    Ok(LimitTable {
        order,
        rows,
        endpoint,
    })
}

fn stable_step(grid: &PhaseGrid, params: &CrystalParams, dt: f64) -> f64 {
    let vx = grid.p_min.abs().max(grid.p_max.abs()) / params.m_tot;
    let vp = 2.0 * params.coupling() * (grid.x_min - params.x0).abs().max((grid.x_max - params.x0).abs());
    // a little headroom below the limit so t_end/steps never rounds over it
    let mut h = dt;
    if vx > 0.0 {
        h = h.min(0.99 * CFL_LIMIT * grid.dx() / vx);
    }
    if vp > 0.0 {
        h = h.min(0.99 * CFL_LIMIT * grid.dp() / vp);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nx: usize, np: usize) -> PhaseGrid {
        PhaseGrid::new(-8.0, 8.0, nx, -3.0, 3.0, np).unwrap()
    }

    /// Wide enough that `ψ(x + y/2)ψ*(x - y/2)` is negligible where the
    /// lag leaves the grid.
    fn wide_grid() -> PhaseGrid {
        PhaseGrid::new(-12.0, 12.0, 192, -3.0, 3.0, 96).unwrap()
    }

    fn gaussian_psi(grid: &PhaseGrid, sigma: f64, x_mean: f64, p_mean: f64, hbar: f64) -> Vec<Complex64> {
        let dx = grid.dx();
        let mut psi: Vec<Complex64> = grid
            .xs()
            .iter()
            .map(|x| {
                let amp = (-(x - x_mean).powi(2) / (4.0 * sigma * sigma)).exp();
                Complex64::from_polar(amp, p_mean * x / hbar)
            })
            .collect();
        let norm: f64 = psi.iter().map(|c| c.norm_sqr()).sum::<f64>() * dx;
        psi.iter_mut().for_each(|c| *c /= norm.sqrt());
        psi
    }

    /// `σx²(t) = σx²(0) + (tσp/m)²` for free motion.
    fn free_variance(sx: f64, sp: f64, m: f64, t: f64) -> f64 {
        sx * sx + (t * sp / m).powi(2)
    }

    #[test]
    fn grid_validation() {
        assert!(PhaseGrid::new(0.0, 1.0, 15, 0.0, 1.0, 16).is_err());
        assert!(PhaseGrid::new(1.0, 0.0, 16, 0.0, 1.0, 16).is_err());
        let g = grid(17, 16);
        assert_eq!(g.dx(), 1.0);
        assert_eq!(g.x(16), 8.0);
    }

    #[test]
    fn wigner_of_gaussian_is_the_analytic_product() {
        let g = wide_grid();
        let hbar = 1.0;
        let sx = 1.0;
        let psi = gaussian_psi(&g, sx, 0.0, 0.0, hbar);
        let w = compute_wigner(&psi, &g, hbar).unwrap();
        let sp = hbar / (2.0 * sx);
        let mut worst = 0.0f64;
        for ip in 0..g.np {
            for ix in 0..g.nx {
                let (x, p) = (g.x(ix), g.p(ip));
                let exact = (-x * x / (2.0 * sx * sx) - p * p / (2.0 * sp * sp)).exp() / (PI * hbar);
                worst = worst.max((w.at(ix, ip).re - exact).abs());
                assert!(w.at(ix, ip).re > -1e-12);
            }
        }
        assert!(worst < 1e-8, "{worst}");
        assert!((w.total().re - 1.0).abs() < 1e-6);
        assert_eq!(w.max_imag(), 0.0);
    }

    #[test]
    fn wigner_marginal_reproduces_density() {
        let g = PhaseGrid::new(-12.0, 12.0, 192, -6.0, 6.0, 128).unwrap();
        let psi = gaussian_psi(&g, 0.7, 1.0, 0.8, 1.0);
        let w = compute_wigner(&psi, &g, 1.0).unwrap();
        let m = marginals(&w);
        for (d, c) in m.position.iter().zip(&psi) {
            assert!((d - c.norm_sqr()).abs() < 1e-6);
        }
        let sp = 1.0 / (2.0 * 0.7);
        for (ip, d) in m.momentum.iter().enumerate() {
            let p = g.p(ip);
            let exact = (-(p - 0.8).powi(2) / (2.0 * sp * sp)).exp() / (sp * (2.0 * PI).sqrt());
            assert!((d - exact).abs() < 1e-6);
        }
    }

    #[test]
    fn wigner_rejects_bad_input() {
        let g = grid(64, 32);
        let psi = vec![Complex64::new(1.0, 0.0); 64];
        assert!(matches!(compute_wigner(&psi, &g, 1.0), Err(Error::Normalization { .. })));
        assert!(compute_wigner(&psi[..10], &g, 1.0).is_err());
        // p range beyond πℏ/(2dx) aliases
        let coarse = PhaseGrid::new(-8.0, 8.0, 16, -3.0, 3.0, 16).unwrap();
        let psi = gaussian_psi(&coarse, 1.0, 0.0, 0.0, 1.0);
        assert!(compute_wigner(&psi, &coarse, 1.0).is_err());
    }

    #[test]
    fn gaussian_constructor_matches_transform_and_moments() {
        let g = wide_grid();
        let psi = gaussian_psi(&g, 1.0, 0.5, -0.3, 1.0);
        let from_psi = compute_wigner(&psi, &g, 1.0).unwrap();
        let direct = gaussian_wigner(0.5, -0.3, 1.0, 0.5, &g, 1.0).unwrap();
        let worst = from_psi
            .values
            .iter()
            .zip(&direct.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst}");

        let w = gaussian_wigner(0.0, 0.0, 1.3, 0.5, &g, 1.0).unwrap();
        assert!((position_variance(&w) - 1.69).abs() < 1e-6);
        assert!((momentum_variance(&w) - 0.25).abs() < 1e-6);
        let (sx, sp) = localization_widths(&w).unwrap();
        assert!((sx - 1.3).abs() < 1e-6 && (sp - 0.5).abs() < 1e-6);
        let m = marginals(&w);
        assert!((m.position.iter().sum::<f64>() * g.dx() - 1.0).abs() < 1e-6);
        assert!((m.momentum.iter().sum::<f64>() * g.dp() - 1.0).abs() < 1e-6);

        assert!(matches!(
            gaussian_wigner(0.0, 0.0, 0.5, 0.5, &g, 1.0),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn gaussian_translates_by_whole_cells() {
        let g = grid(65, 32);
        let a = gaussian_wigner(0.0, 0.0, 1.0, 1.0, &g, 1.0).unwrap();
        let b = gaussian_wigner(3.0 * g.dx(), 0.0, 1.0, 1.0, &g, 1.0).unwrap();
        for ip in 0..g.np {
            for ix in 0..g.nx - 3 {
                assert!((a.at(ix, ip) - b.at(ix + 3, ip)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn quantum_correction_vanishes_for_quadratics() {
        let g = grid(32, 32);
        let w = gaussian_wigner(0.3, 0.1, 1.0, 1.0, &g, 1.0).unwrap();
        for potential in [&[][..], &[0.0][..], &[1.0, 2.0, 3.0][..], &[0.0, 0.0, 5.0, 0.0][..]] {
            let q = quantum_correction(potential, &w).unwrap();
            assert!(q.values.iter().all(|c| *c == Complex64::new(0.0, 0.0)));
        }
        let q = quantum_correction(&[0.0, 0.0, 1.0], &WignerField::zeros(g, 1.0)).unwrap();
        assert!(q.values.iter().all(|c| c.norm() == 0.0));
        assert!(matches!(
            quantum_correction(&[0.0, 0.0, 0.0, 1.0], &w),
            Err(Error::UnsupportedPotential { degree: 3 })
        ));
    }

    #[test]
    fn free_spreading_matches_oracle() {
        let g = grid(128, 128);
        let (sx, sp, m) = (1.0, 0.5, 1.0);
        let w0 = gaussian_wigner(0.0, 0.0, sx, sp, &g, 1.0).unwrap();
        let t = m * sx / sp;
        let steps = 100;
        let w = evolve_wigner(&w0, &CrystalParams::default(), t / steps as f64, steps, WignerMode::RealEffective)
            .unwrap();
        let expected = free_variance(sx, sp, m, t);
        let got = position_variance(&w);
        assert!((got / expected - 1.0).abs() < 0.01, "{got} vs {expected}");
        assert!((w.time - t).abs() < 1e-12);

        let before = marginals(&w0).momentum;
        let after = marginals(&w).momentum;
        let worst = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn free_transport_conserves_mass_over_many_steps() {
        let g = PhaseGrid::new(-12.0, 12.0, 64, -3.0, 3.0, 64).unwrap();
        let w0 = gaussian_wigner(0.0, 0.0, 1.0, 0.5, &g, 1.0).unwrap();
        let report = evolve_wigner_with(
            &w0,
            &CrystalParams::default(),
            &EvolveOptions::new(0.004, 1000, WignerMode::RealEffective),
        )
        .unwrap();
        assert!(report.relative_mass_drift < 1e-4, "{}", report.relative_mass_drift);
        assert!(!report.grid_too_small);
    }

    #[test]
    fn narrow_packet_drifts_at_its_momentum() {
        let g = PhaseGrid::new(-4.0, 12.0, 256, -1.0, 3.0, 64).unwrap();
        let p1 = 2.0;
        let w0 = gaussian_wigner(0.0, p1, 0.3, 0.05, &g, 0.01).unwrap();
        let params = CrystalParams {
            m_tot: 2.0,
            ..CrystalParams::default()
        };
        let w = evolve_wigner(&w0, &params, 0.01, 300, WignerMode::RealEffective).unwrap();
        let a = localization(&w0).unwrap();
        let b = localization(&w).unwrap();
        assert!((b.centroid_x - a.centroid_x - 3.0 * p1 / 2.0).abs() < 0.01);
        assert!((b.centroid_p - a.centroid_p).abs() < 1e-6);
    }

    #[test]
    fn modes_agree_exactly_without_coupling() {
        let g = grid(64, 64);
        let w0 = gaussian_wigner(0.5, 0.2, 1.0, 0.5, &g, 1.0).unwrap();
        let params = CrystalParams::default();
        let a = evolve_wigner(&w0, &params, 0.01, 50, WignerMode::RealEffective).unwrap();
        let b = evolve_wigner(&w0, &params, 0.01, 50, WignerMode::AsWrittenComplex).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn real_mode_stays_real_and_complex_mode_does_not() {
        let g = PhaseGrid::new(-6.0, 6.0, 64, -6.0, 6.0, 64).unwrap();
        let w0 = gaussian_wigner(1.0, 0.0, 1.0, 0.5, &g, 1.0).unwrap();
        let params = CrystalParams {
            epsilon: 0.5,
            ..CrystalParams::default()
        };
        let real = evolve_wigner(&w0, &params, 0.01, 50, WignerMode::RealEffective).unwrap();
        assert_eq!(real.max_imag(), 0.0);
        let complex = evolve_wigner(&w0, &params, 0.01, 50, WignerMode::AsWrittenComplex).unwrap();
        assert!(complex.max_imag() > 1e-3);
    }

    #[test]
    fn complex_mode_renormalization_holds_total() {
        let g = PhaseGrid::new(-6.0, 6.0, 64, -6.0, 6.0, 64).unwrap();
        let w0 = gaussian_wigner(1.0, 0.0, 1.0, 0.5, &g, 1.0).unwrap();
        let params = CrystalParams {
            epsilon: 0.5,
            ..CrystalParams::default()
        };
        let mut opts = EvolveOptions::new(0.01, 50, WignerMode::AsWrittenComplex);
        opts.renormalize = true;
        let report = evolve_wigner_with(&w0, &params, &opts).unwrap();
        assert!(report.relative_mass_drift < 1e-10);
    }

    #[test]
    fn cfl_is_checked_before_stepping() {
        let g = grid(64, 64);
        let w0 = gaussian_wigner(0.0, 0.0, 1.0, 0.5, &g, 1.0).unwrap();
        let err = evolve_wigner(&w0, &CrystalParams::default(), 1.0, 1, WignerMode::RealEffective).unwrap_err();
        assert!(matches!(err, Error::CflViolation { axis: "x", .. }));
        let strong = CrystalParams {
            epsilon: 100.0,
            ..CrystalParams::default()
        };
        let err = evolve_wigner(&w0, &strong, 0.01, 1, WignerMode::RealEffective).unwrap_err();
        assert!(matches!(err, Error::CflViolation { axis: "p", .. }));
    }

    #[test]
    fn outflow_is_flagged() {
        let g = PhaseGrid::new(-2.0, 2.0, 32, -3.0, 3.0, 32).unwrap();
        let w0 = gaussian_wigner(0.0, 1.0, 0.5, 1.0, &g, 1.0).unwrap();
        let report = evolve_wigner_with(
            &w0,
            &CrystalParams::default(),
            &EvolveOptions::new(0.02, 100, WignerMode::RealEffective),
        )
        .unwrap();
        assert!(report.grid_too_small);
    }

    #[test]
    fn effective_force_pulls_toward_center() {
        let g = PhaseGrid::new(-6.0, 6.0, 128, -10.0, 10.0, 128).unwrap();
        let params = CrystalParams {
            epsilon: 2.0,
            n_order: 2.0,
            x0: 0.5,
            m_tot: 1.0,
        };
        let w0 = gaussian_wigner(2.5, 0.0, 0.5, 1.0, &g, 1.0).unwrap();
        // quarter period is π/(2ω) ≈ 0.56; stay inside it
        let mut field = w0;
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            field = evolve_wigner(&field, &params, 0.002, 25, WignerMode::RealEffective).unwrap();
            let (xs, total) = (g.xs(), field.total().re);
            let second: f64 = marginals(&field)
                .position
                .iter()
                .zip(&xs)
                .map(|(d, x)| d * (x - params.x0).powi(2))
                .sum::<f64>()
                * g.dx()
                / total;
            assert!(second < last);
            last = second;
        }
    }

    #[test]
    fn first_order_upwind_converges() {
        let (sx, sp, m, t) = (1.0, 0.5, 1.0, 1.0);
        let error_at = |n: usize| {
            let g = PhaseGrid::new(-8.0, 8.0, n, -3.0, 3.0, n).unwrap();
            let w0 = gaussian_wigner(0.0, 0.0, sx, sp, &g, 1.0).unwrap();
            // fixed Courant number 0.4 along x
            let steps = ((t * 3.0 / (0.4 * g.dx())).ceil()) as usize;
            let mut opts = EvolveOptions::new(t / steps as f64, steps, WignerMode::RealEffective);
            opts.advection = Advection::Upwind1;
            let w = evolve_wigner_with(&w0, &CrystalParams::default(), &opts).unwrap().field;
            let mut err = 0.0f64;
            for ip in 0..n {
                for ix in 0..n {
                    let (x, p) = (g.x(ix), g.p(ip));
                    let xc = x - p * t / m;
                    let exact = (-xc * xc / (2.0 * sx * sx) - p * p / (2.0 * sp * sp)).exp()
                        / (2.0 * PI * sx * sp);
                    err += (w.at(ix, ip).re - exact).abs() * g.dx() * g.dp();
                }
            }
            err
        };
        let (coarse, fine) = (error_at(64), error_at(128));
        assert!(coarse / fine >= 1.8, "ratio {}", coarse / fine);
    }

    #[test]
    fn limit_orders_coincide_for_trivial_sequences() {
        let g = grid(64, 64);
        let w0 = gaussian_wigner(0.0, 0.0, 1.0, 0.5, &g, 1.0).unwrap();
        let base = CrystalParams::default();
        let a = limit_experiment(LimitOrder::EpsFirst, &[0.0], &[1.0], &base, &w0, 0.01, 0.5).unwrap();
        let b = limit_experiment(LimitOrder::NFirst, &[0.0], &[1.0], &base, &w0, 0.01, 0.5).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.endpoint, b.endpoint);
    }

    #[test]
    fn limit_sequences_must_be_monotone() {
        let g = grid(32, 32);
        let w0 = gaussian_wigner(0.0, 0.0, 1.0, 0.5, &g, 1.0).unwrap();
        let base = CrystalParams::default();
        assert!(limit_experiment(LimitOrder::EpsFirst, &[0.1, 1.0], &[1.0], &base, &w0, 0.01, 0.1).is_err());
        assert!(limit_experiment(LimitOrder::NFirst, &[1.0], &[4.0, 2.0], &base, &w0, 0.01, 0.1).is_err());
        assert!(limit_experiment(LimitOrder::NFirst, &[], &[1.0], &base, &w0, 0.01, 0.1).is_err());
    }

    #[test]
    fn limit_rows_follow_loop_order() {
        let g = PhaseGrid::new(-6.0, 6.0, 32, -8.0, 8.0, 32).unwrap();
        let w0 = gaussian_wigner(0.0, 0.0, 1.0, 0.5, &g, 1.0).unwrap();
        let base = CrystalParams::default();
        let t = limit_experiment(LimitOrder::EpsFirst, &[1.0, 0.5], &[1.0, 2.0], &base, &w0, 0.01, 0.05).unwrap();
        let pairs: Vec<_> = t.rows.iter().map(|r| (r.eps, r.n_order)).collect();
        assert_eq!(pairs, [(1.0, 1.0), (0.5, 1.0), (1.0, 2.0), (0.5, 2.0)]);
        let t = limit_experiment(LimitOrder::NFirst, &[1.0, 0.5], &[1.0, 2.0], &base, &w0, 0.01, 0.05).unwrap();
        let pairs: Vec<_> = t.rows.iter().map(|r| (r.eps, r.n_order)).collect();
        assert_eq!(pairs, [(1.0, 1.0), (1.0, 2.0), (0.5, 1.0), (0.5, 2.0)]);
    }
}
