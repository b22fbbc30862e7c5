//! Run configuration: TOML file, `--set key=value` overrides, defaults and
//! validation. Every error names the offending key path.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use suvlab::collapse::{IntegratorConfig, SuvParams};
use suvlab::noise::NoiseKind;
use suvlab::wigner::{Advection, CrystalParams, PhaseGrid, WignerMode};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum Subcommand {
    Trajectory,
    Ensemble,
    SweepGj,
    SweepTau,
    SweepScaling,
    Rabi,
    Flowfield,
    Wigner,
    Limits,
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use clap::ValueEnum;
        let value = self.to_possible_value().expect("no skipped variants");
        f.write_str(value.get_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
    Both,
}

impl Format {
    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }

    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub format: Format,
    pub params: SuvParams,
    pub noise: NoiseKind,
    pub integrator: IntegratorConfig,
    pub trajectory: TrajectorySection,
    pub ensemble: EnsembleSection,
    pub sweep: SweepSection,
    pub rabi: RabiSection,
    pub flowfield: FlowfieldSection,
    pub crystal: CrystalParams,
    pub grid: PhaseGrid,
    pub wigner: WignerSection,
    pub limits: LimitsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            format: Format::Csv,
            params: SuvParams::default(),
            noise: NoiseKind::WhiteNoise,
            integrator: IntegratorConfig::default(),
            trajectory: TrajectorySection::default(),
            ensemble: EnsembleSection::default(),
            sweep: SweepSection::default(),
            rabi: RabiSection::default(),
            flowfield: FlowfieldSection::default(),
            crystal: CrystalParams::default(),
            grid: PhaseGrid {
                x_min: -8.0,
                x_max: 8.0,
                nx: 256,
                p_min: -3.0,
                p_max: 3.0,
                np: 256,
            },
            wigner: WignerSection::default(),
            limits: LimitsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySection {
    pub theta0: f64,
    /// Steps between written rows.
    pub record_every: usize,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        Self {
            theta0: PI / 3.0,
            record_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub trajectories: usize,
    pub theta0: f64,
    pub record_every: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            trajectories: 10_000,
            theta0: PI / 3.0,
            record_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ratios: Vec<f64>,
    pub tau_values: Vec<f64>,
    pub rate_scales: Vec<f64>,
    /// Tolerance on the deterministic scaling slope around -1.
    pub slope_tolerance: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ratios: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            tau_values: vec![1e-4, 1e-2, 0.1, 1.0],
            rate_scales: vec![1.0, 2.0, 4.0, 8.0],
            slope_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RabiSection {
    pub theta0: f64,
    pub omega: f64,
    pub dt: f64,
    pub periods: f64,
}

impl Default for RabiSection {
    fn default() -> Self {
        Self {
            theta0: 0.0,
            omega: 1.0,
            dt: 1e-3,
            periods: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowfieldSection {
    pub xi: f64,
    pub points: usize,
}

impl Default for FlowfieldSection {
    fn default() -> Self {
        Self {
            xi: (2.0 * PI / 5.0).cos(),
            points: 181,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WignerSection {
    pub hbar: f64,
    pub x_mean: f64,
    pub p_mean: f64,
    pub sigma_x: f64,
    pub sigma_p: f64,
    pub dt: f64,
    pub steps: usize,
    pub mode: WignerMode,
    pub advection: Advection,
    pub renormalize: bool,
    /// Steps between field snapshots; 0 writes only the initial and final
    /// fields.
    pub snapshot_every: usize,
    /// Relative tolerance of the free-spreading gate, checked when `ε = 0`.
    pub spreading_tolerance: f64,
}

impl Default for WignerSection {
    fn default() -> Self {
        Self {
            hbar: 1.0,
            x_mean: 0.0,
            p_mean: 0.0,
            sigma_x: 1.0,
            sigma_p: 0.5,
            dt: 0.01,
            steps: 200,
            mode: WignerMode::RealEffective,
            advection: Advection::Upwind3,
            renormalize: false,
            snapshot_every: 0,
            spreading_tolerance: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitOrders {
    EpsFirst,
    NFirst,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSequences {
    pub eps_sequence: Vec<f64>,
    pub n_sequence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsSection {
    pub order: LimitOrders,
    pub eps_first: LimitSequences,
    pub n_first: LimitSequences,
    pub dt: f64,
    pub t_end: f64,
}

impl Default for LimitsSection {
    fn default() -> Self {
        Self {
            order: LimitOrders::Both,
            eps_first: LimitSequences {
                eps_sequence: vec![1.0, 0.1, 0.0],
                n_sequence: vec![1.0],
            },
            n_first: LimitSequences {
                eps_sequence: vec![1.0],
                n_sequence: vec![1.0, 2.0, 4.0],
            },
            dt: 0.01,
            t_end: 0.5,
        }
    }
}

/// Reads `file`, applies overrides in order and validates the result.
pub fn parse_config(file: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(file)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", file.display())))?;
    parse_config_str(&text, overrides)
}

pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(format!("invalid TOML: {e}")))?;
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    expand_sugar(&mut table)?;
    check_noise_keys(&mut table)?;
    fill_limit_sequences(&mut table);

    let cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Each limit order has its own default sequences, so a partial
/// `[limits.n_first]` table inherits the missing one from that order.
fn fill_limit_sequences(table: &mut Table) {
    let Some(Value::Table(limits)) = table.get_mut("limits") else {
        return;
    };
    let defaults = LimitsSection::default();
    for (name, seq) in [("eps_first", &defaults.eps_first), ("n_first", &defaults.n_first)] {
        let Some(Value::Table(order)) = limits.get_mut(name) else {
            continue;
        };
        for (key, values) in [("eps_sequence", &seq.eps_sequence), ("n_sequence", &seq.n_sequence)] {
            order
                .entry(key)
                .or_insert_with(|| Value::Array(values.iter().map(|&v| Value::Float(v)).collect()));
        }
    }
}

fn apply_override(table: &mut Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    // accept any TOML literal; bare words fall back to strings
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("{}: is not a table", parts[..=depth].join(".")))
        })?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// `params.G_over_J = r` sets `G = r·J`.
fn expand_sugar(table: &mut Table) -> Result<(), CliError> {
    let Some(params) = table.get_mut("params").and_then(Value::as_table_mut) else {
        return Ok(());
    };
    let Some(ratio) = params.remove("G_over_J") else {
        return Ok(());
    };
    let ratio = as_float(&ratio).ok_or_else(|| CliError::Config("params.G_over_J: expected a number".into()))?;
    if params.contains_key("G") {
        return Err(CliError::Config("params.G_over_J: conflicts with an explicit params.G".into()));
    }
    let j = match params.get("J") {
        Some(v) => as_float(v).ok_or_else(|| CliError::Config("params.J: expected a number".into()))?,
        None => SuvParams::default().j,
    };
    params.insert("G".into(), Value::Float(ratio * j));
    Ok(())
}

fn as_float(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

/// Rejects parameters that do not belong to the noise kind, which defaults
/// to white noise when unspecified.
fn check_noise_keys(table: &mut Table) -> Result<(), CliError> {
    let Some(noise) = table.get_mut("noise").and_then(Value::as_table_mut) else {
        return Ok(());
    };
    let kind = match noise.get("kind") {
        None => {
            noise.insert("kind".into(), Value::String("white_noise".into()));
            "white_noise".to_string()
        }
        Some(v) => match v.as_str() {
            Some(k) => k.to_string(),
            None => return Ok(()),
        },
    };
    let allowed: &[&str] = match kind.as_str() {
        "white_noise" => &[],
        "ornstein_uhlenbeck" => &["tau_t"],
        "constant_field" => &["xi"],
        _ => return Ok(()),
    };
    for key in noise.keys().filter(|k| *k != "kind") {
        if !allowed.contains(&key.as_str()) {
            return Err(CliError::Config(format!("noise.{key}: not valid for noise kind {kind}")));
        }
    }
    Ok(())
}

fn section(name: &str, result: suvlab::Result<()>) -> Result<(), CliError> {
    result.map_err(|e| match e {
        suvlab::Error::InvalidParameter { name: field, reason } => {
            CliError::Config(format!("{name}.{field}: {reason}"))
        }
        other => CliError::Config(format!("{name}: {other}")),
    })
}

fn invalid(key: &str, reason: impl fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {reason}"))
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    section("params", cfg.params.validate())?;
    section("noise", cfg.noise.validate())?;
    section("integrator", cfg.integrator.validate())?;
    section("crystal", cfg.crystal.validate())?;
    section("grid", cfg.grid.validate())?;

    for (key, theta) in [
        ("trajectory.theta0", cfg.trajectory.theta0),
        ("ensemble.theta0", cfg.ensemble.theta0),
        ("rabi.theta0", cfg.rabi.theta0),
    ] {
        if !(0.0..=PI).contains(&theta) {
            return Err(invalid(key, format!("{theta} outside [0, π]")));
        }
    }
    if cfg.trajectory.record_every == 0 {
        return Err(invalid("trajectory.record_every", "must be at least 1"));
    }
    if cfg.ensemble.trajectories == 0 {
        return Err(invalid("ensemble.trajectories", "must be at least 1"));
    }
    if cfg.ensemble.record_every == 0 {
        return Err(invalid("ensemble.record_every", "must be at least 1"));
    }
    if cfg.sweep.ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(invalid("sweep.ratios", "entries must be positive"));
    }
    if cfg.sweep.tau_values.iter().any(|t| !(*t > 0.0)) {
        return Err(invalid("sweep.tau_values", "entries must be positive"));
    }
    if cfg.sweep.rate_scales.iter().any(|s| !(*s > 0.0)) {
        return Err(invalid("sweep.rate_scales", "entries must be positive"));
    }
    if !(cfg.rabi.omega > 0.0 && cfg.rabi.dt > 0.0 && cfg.rabi.periods > 0.0) {
        return Err(invalid("rabi", "omega, dt and periods must be positive"));
    }
    if cfg.flowfield.points < 2 {
        return Err(invalid("flowfield.points", "need at least two points"));
    }
    let w = &cfg.wigner;
    if !(w.hbar > 0.0) {
        return Err(invalid("wigner.hbar", "must be positive"));
    }
    if !(w.dt > 0.0) {
        return Err(invalid("wigner.dt", "must be positive"));
    }
    if !(w.sigma_x > 0.0 && w.sigma_p > 0.0) {
        return Err(invalid("wigner.sigma_x", "widths must be positive"));
    }
    if w.sigma_x * w.sigma_p < 0.5 * w.hbar * (1.0 - 1e-12) {
        return Err(invalid("wigner.sigma_p", "σx·σp is below ℏ/2"));
    }
    let l = &cfg.limits;
    for (name, seq) in [("eps_first", &l.eps_first), ("n_first", &l.n_first)] {
        if seq.eps_sequence.is_empty() || seq.eps_sequence.windows(2).any(|p| p[1] > p[0]) {
            return Err(invalid(
                &format!("limits.{name}.eps_sequence"),
                "must be non-empty and non-increasing",
            ));
        }
        if seq.n_sequence.is_empty() || seq.n_sequence.windows(2).any(|p| p[1] < p[0]) {
            return Err(invalid(
                &format!("limits.{name}.n_sequence"),
                "must be non-empty and non-decreasing",
            ));
        }
    }
    if !(l.dt > 0.0 && l.t_end >= 0.0) {
        return Err(invalid("limits.dt", "need dt > 0 and t_end ≥ 0"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_text(text: &str, overrides: &[&str]) -> String {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        parse_config_str(text, &o).unwrap_err().to_string()
    }

    #[test]
    fn override_parsing() {
        let mut t = Table::new();
        apply_override(&mut t, "a.b.c=3").unwrap();
        apply_override(&mut t, "a.s=word").unwrap();
        apply_override(&mut t, "x = [1, 2]").unwrap();
        assert_eq!(t["a"]["b"]["c"].as_integer(), Some(3));
        assert_eq!(t["a"]["s"].as_str(), Some("word"));
        assert_eq!(t["x"].as_array().map(Vec::len), Some(2));
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
        assert!(apply_override(&mut t, "x.y=1").is_err());
    }

    #[test]
    fn integer_literals_become_floats_where_needed() {
        let cfg = parse_config_str("[params]\nJ = 2\n", &[]).unwrap();
        assert_eq!(cfg.params.j, 2.0);
    }

    #[test]
    fn errors_carry_key_paths() {
        assert!(err_text("[params]\nJ = \"one\"\n", &[]).contains("params.J"));
        assert!(err_text("[crystal]\nm_tot = -1.0\n", &[]).contains("crystal.m_tot"));
        assert!(err_text("", &["ensemble.theta0=4.0"]).contains("ensemble.theta0"));
        assert!(err_text("", &["limits.n_first.n_sequence=[4.0, 1.0]"]).contains("limits.n_first.n_sequence"));
    }

    #[test]
    fn partial_limit_order_keeps_its_defaults() {
        let cfg = parse_config_str("[limits.n_first]\nn_sequence = [1.0, 8.0]\n", &[]).unwrap();
        assert_eq!(cfg.limits.n_first.eps_sequence, [1.0]);
        assert_eq!(cfg.limits.n_first.n_sequence, [1.0, 8.0]);
        assert_eq!(cfg.limits.eps_first, LimitsSection::default().eps_first);
    }

    #[test]
    fn sugar_conflicts_with_explicit_g() {
        assert!(err_text("[params]\nG = 1.0\nG_over_J = 2.0\n", &[]).contains("G_over_J"));
    }
}
