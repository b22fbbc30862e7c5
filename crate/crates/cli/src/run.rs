//! Subcommand dispatch. Each handler writes its data files and records any
//! statistical gates; the manifest is written last.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use chrono::{SecondsFormat, Utc};
use serde_json::json;
use suvlab::bloch::BlochState;
use suvlab::collapse::{classify_fixed_points, evolve_trajectory, flow_field, rabi_evolution};
use suvlab::ensemble::{
    born_statistics_test, gj_ratio_sweep, martingale_max_z, run_ensemble, scaling_sweep, tau_sweep,
    EnsembleConfig, GATE_SIGMAS,
};
use suvlab::noise::sample_path;
use suvlab::wigner::{
    evolve_wigner_with, gaussian_wigner, limit_experiment, localization, marginals, momentum_variance,
    position_variance, EvolveOptions, LimitOrder, LimitTable, WignerField,
};

use crate::config::{LimitOrders, RunConfig, Subcommand};
use crate::output::{Gate, Outputs, RunManifest};
use crate::CliError;

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Runs one subcommand, writing outputs and `manifest.json` into `out_dir`.
pub fn run(subcommand: Subcommand, cfg: &RunConfig, out_dir: &Path) -> Result<RunManifest, CliError> {
    let started_at = now();
    let mut out = Outputs::create(out_dir, cfg.format)?;
    match subcommand {
        Subcommand::Trajectory => trajectory(cfg, &mut out)?,
        Subcommand::Ensemble => ensemble(cfg, &mut out)?,
        Subcommand::SweepGj => sweep_gj(cfg, &mut out)?,
        Subcommand::SweepTau => sweep_tau(cfg, &mut out)?,
        Subcommand::SweepScaling => sweep_scaling(cfg, &mut out)?,
        Subcommand::Rabi => rabi(cfg, &mut out)?,
        Subcommand::Flowfield => flowfield(cfg, &mut out)?,
        Subcommand::Wigner => wigner(cfg, &mut out)?,
        Subcommand::Limits => limits(cfg, &mut out)?,
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: subcommand.to_string(),
        seed: cfg.seed,
        started_at,
        finished_at: now(),
        config: cfg.clone(),
        outputs: Vec::new(),
        gates: Vec::new(),
        all_gates_pass: true,
    };
    out.finish(manifest)
}

fn ensemble_config(cfg: &RunConfig) -> EnsembleConfig {
    EnsembleConfig {
        trajectories: cfg.ensemble.trajectories,
        theta0: cfg.ensemble.theta0,
        params: cfg.params,
        noise: cfg.noise,
        integrator: cfg.integrator,
        seed: cfg.seed,
        record_every: cfg.ensemble.record_every,
    }
}

fn trajectory(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let n = cfg.integrator.n_steps();
    let path = sample_path(&cfg.noise, cfg.integrator.dt, n, cfg.seed)?;
    let s0 = BlochState::from_polar(cfg.trajectory.theta0)?;
    let traj = evolve_trajectory(&s0, &cfg.params, &path, &cfg.integrator)?;
    let last = traj.times.len() - 1;
    let rows: Vec<Vec<f64>> = (0..=last)
        .filter(|&k| k % cfg.trajectory.record_every == 0 || k == last)
        .map(|k| {
            let xi = path.values.get(k).copied().unwrap_or(f64::NAN);
            vec![traj.times[k], traj.thetas[k], xi]
        })
        .collect();
    out.table("trajectory", &["t [s]", "theta [rad]", "xi [s^-1/2]"], &rows)?;
    out.json(
        "summary.json",
        &json!({
            "theta0": cfg.trajectory.theta0,
            "outcome": traj.outcome,
            "collapse_time": traj.collapse_time,
            "final_theta": traj.thetas[last],
            "steps": last,
            "noise_seed": traj.noise_seed,
        }),
    )
}

fn ensemble(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let r = run_ensemble(&ensemble_config(cfg))?;
    let born = born_statistics_test(&r)?;
    let martingale_z = martingale_max_z(&r);

    let rows: Vec<Vec<f64>> = r
        .series_times
        .iter()
        .zip(&r.mean_sigma_z_series)
        .zip(&r.stderr_series)
        .map(|((t, m), s)| vec![*t, *m, *s])
        .collect();
    out.table("ensemble", &["t [s]", "mean_sigma_z [1]", "stderr [1]"], &rows)?;
    let counts = [
        ("pole0", r.count_pole0),
        ("pole1", r.count_pole1),
        ("unresolved", r.count_unresolved),
    ];
    let hist: Vec<Vec<String>> = counts
        .iter()
        .map(|(name, n)| vec![name.to_string(), n.to_string()])
        .collect();
    out.text_table("outcomes", &["outcome", "count [trajectories]"], &hist)?;

    let se = (born.expected_p0 * (1.0 - born.expected_p0) / r.trajectories() as f64).sqrt();
    out.gates.push(Gate::within(
        "born_rule_p0",
        born.expected_p0,
        born.empirical_p0,
        GATE_SIGMAS * se,
    ));
    out.gates.push(Gate::below(
        "sigma_z_conservation_max_z",
        0.0,
        martingale_z,
        GATE_SIGMAS,
    ));
    out.json(
        "summary.json",
        &json!({
            "trajectories": r.trajectories(),
            "count_pole0": r.count_pole0,
            "count_pole1": r.count_pole1,
            "count_unresolved": r.count_unresolved,
            "born_test": born,
            "martingale_max_z": martingale_z,
        }),
    )
}

fn sweep_gj(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let rows = gj_ratio_sweep(&cfg.sweep.ratios, cfg.ensemble.theta0, &ensemble_config(cfg))?;
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.ratio, r.empirical_p0, r.unresolved as f64])
        .collect();
    out.table(
        "sweep_gj",
        &["G_over_J [1]", "p0_empirical [1]", "unresolved [trajectories]"],
        &table,
    )?;
    out.json(
        "summary.json",
        &json!({ "theta0": cfg.ensemble.theta0, "born_p0": (0.5 * cfg.ensemble.theta0).cos().powi(2), "rows": rows }),
    )
}

fn sweep_tau(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let rows = tau_sweep(&cfg.sweep.tau_values, cfg.ensemble.theta0, &ensemble_config(cfg))?;
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.tau_t, r.empirical_p0, r.born_deviation_sigma])
        .collect();
    out.table(
        "sweep_tau",
        &["tau_t [s]", "p0_empirical [1]", "born_deviation [binomial sigma]"],
        &table,
    )?;
    out.json("summary.json", &json!({ "theta0": cfg.ensemble.theta0, "rows": rows }))
}

fn sweep_scaling(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let report = scaling_sweep(&cfg.sweep.rate_scales, cfg.ensemble.theta0, &ensemble_config(cfg))?;
    let table: Vec<Vec<f64>> = report
        .rows
        .iter()
        .map(|r| vec![r.scale, r.epsilon_n, r.median_collapse_time])
        .collect();
    out.table(
        "sweep_scaling",
        &["scale [1]", "epsilon_N [1]", "median_collapse_time [s]"],
        &table,
    )?;
    if cfg.params.g == 0.0 {
        out.gates.push(Gate::within(
            "collapse_time_slope",
            -1.0,
            report.slope,
            cfg.sweep.slope_tolerance,
        ));
    }
    out.json("summary.json", &report)
}

fn rabi(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let r = &cfg.rabi;
    let v0 = BlochState::from_polar(r.theta0)?.to_state_vector();
    let t_end = r.periods * TAU / r.omega;
    let states = rabi_evolution(&v0, r.omega, r.dt, t_end)?;
    let full = (t_end / r.dt).floor() as usize;
    let rows: Vec<Vec<f64>> = states
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let t = if k <= full { k as f64 * r.dt } else { t_end };
            vec![t, v.c0.re, v.c0.im, v.c1.re, v.c1.im, v.sigma_z_expectation(), v.norm_sqr()]
        })
        .collect();
    out.table(
        "rabi",
        &[
            "t [s]",
            "c0_re [1]",
            "c0_im [1]",
            "c1_re [1]",
            "c1_im [1]",
            "sigma_z [1]",
            "norm_sqr [1]",
        ],
        &rows,
    )?;
    let norm_drift = states
        .windows(2)
        .map(|w| (w[1].norm_sqr() - w[0].norm_sqr()).abs())
        .fold(0.0, f64::max);
    out.gates.push(Gate::below("norm_drift_per_step", 0.0, norm_drift, 1e-12));
    let fidelity = v0.fidelity(states.last().expect("at least the initial state"));
    if r.periods.fract() == 0.0 {
        out.gates.push(Gate::within("period_return_fidelity", 1.0, fidelity, 1e-10));
    }
    out.json(
        "summary.json",
        &json!({ "t_end": t_end, "final_fidelity": fidelity, "max_norm_drift_per_step": norm_drift }),
    )
}

fn flowfield(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let f = &cfg.flowfield;
    let (j, g) = (cfg.params.effective_j(), cfg.params.effective_g());
    let grid: Vec<f64> = (0..f.points)
        .map(|i| PI * i as f64 / (f.points - 1) as f64)
        .collect();
    let flow = flow_field(&grid, f.xi, j, g)?;
    let rows: Vec<Vec<f64>> = flow.iter().map(|(t, d)| vec![*t, *d]).collect();
    out.table("flowfield", &["theta [rad]", "dtheta_dt [rad/s]"], &rows)?;
    let fixed = classify_fixed_points(f.xi, j, g)?;
    out.json("summary.json", &json!({ "xi": f.xi, "fixed_points": fixed }))
}

fn initial_field(cfg: &RunConfig) -> Result<WignerField, CliError> {
    let w = &cfg.wigner;
    Ok(gaussian_wigner(
        w.x_mean, w.p_mean, w.sigma_x, w.sigma_p, &cfg.grid, w.hbar,
    )?)
}

fn field_rows(field: &WignerField) -> Vec<Vec<f64>> {
    let g = &field.grid;
    let mut rows = Vec::with_capacity(g.len());
    for ip in 0..g.np {
        for ix in 0..g.nx {
            let w = field.at(ix, ip);
            rows.push(vec![g.x(ix), g.p(ip), w.re, w.im]);
        }
    }
    rows
}

const FIELD_HEADER: [&str; 4] = ["x [m]", "p [kg m/s]", "W_re [1/(m kg m/s)]", "W_im [1/(m kg m/s)]"];

fn wigner(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let w = &cfg.wigner;
    let mut field = initial_field(cfg)?;
    let chunk = if w.snapshot_every == 0 {
        w.steps.max(1)
    } else {
        w.snapshot_every
    };
    let width_row = |f: &WignerField| -> Result<Vec<f64>, CliError> {
        let loc = localization(f)?;
        let total = f.total();
        Ok(vec![
            f.time,
            position_variance(f).sqrt(),
            momentum_variance(f).sqrt(),
            loc.sigma_x,
            loc.sigma_p,
            total.re,
            total.im,
        ])
    };
    let mut widths = vec![width_row(&field)?];
    out.table("wigner_field_00000", &FIELD_HEADER, &field_rows(&field))?;
    let mut done = 0;
    let mut max_drift: f64 = 0.0;
    let initial_total = field.total();
    while done < w.steps {
        let steps = chunk.min(w.steps - done);
        let opts = EvolveOptions {
            dt: w.dt,
            steps,
            mode: w.mode,
            advection: w.advection,
            renormalize: w.renormalize,
        };
        field = evolve_wigner_with(&field, &cfg.crystal, &opts)?.field;
        done += steps;
        let drift = (field.total() - initial_total).norm() / initial_total.norm();
        max_drift = max_drift.max(drift);
        widths.push(width_row(&field)?);
        out.table(&format!("wigner_field_{done:05}"), &FIELD_HEADER, &field_rows(&field))?;
    }
    out.table(
        "wigner_widths",
        &[
            "t [s]",
            "sigma_x [m]",
            "sigma_p [kg m/s]",
            "sigma_x_eff [m]",
            "sigma_p_eff [kg m/s]",
            "total_re [1]",
            "total_im [1]",
        ],
        &widths,
    )?;

    let mut summary = json!({
        "final_time": field.time,
        "mode": w.mode,
        "max_relative_mass_drift": max_drift,
        "grid_too_small": max_drift > suvlab::wigner::MASS_DRIFT_WARNING,
        "max_imag": field.max_imag(),
    });
    if cfg.crystal.coupling() == 0.0 {
        let t = field.time;
        let expected = w.sigma_x.powi(2) + (t * w.sigma_p / cfg.crystal.m_tot).powi(2);
        let got = position_variance(&field);
        out.gates.push(Gate::within(
            "free_spreading_variance",
            expected,
            got,
            w.spreading_tolerance * expected,
        ));
        summary["free_spreading"] = json!({ "expected_variance": expected, "variance": got });
    }
    out.json("summary.json", &summary)
}

fn limits(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let l = &cfg.limits;
    let field0 = initial_field(cfg)?;
    let loc0 = localization(&field0)?;
    let orders: &[LimitOrder] = match l.order {
        LimitOrders::EpsFirst => &[LimitOrder::EpsFirst],
        LimitOrders::NFirst => &[LimitOrder::NFirst],
        LimitOrders::Both => &[LimitOrder::EpsFirst, LimitOrder::NFirst],
    };
    let mut summary = serde_json::Map::new();
    for &order in orders {
        let seq = match order {
            LimitOrder::EpsFirst => &l.eps_first,
            LimitOrder::NFirst => &l.n_first,
        };
        let table = limit_experiment(
            order,
            &seq.eps_sequence,
            &seq.n_sequence,
            &cfg.crystal,
            &field0,
            l.dt,
            l.t_end,
        )?;
        let name = match order {
            LimitOrder::EpsFirst => "eps_first",
            LimitOrder::NFirst => "n_first",
        };
        let rows: Vec<Vec<f64>> = table
            .rows
            .iter()
            .map(|r| vec![r.eps, r.n_order, r.sigma_x_eff, r.sigma_p_eff, r.centroid_x])
            .collect();
        out.table(
            &format!("limits_{name}"),
            &["eps [1]", "N [1]", "sigma_x_eff [m]", "sigma_p_eff [kg m/s]", "centroid_x [m]"],
            &rows,
        )?;
        limit_gates(cfg, order, &table, &field0, loc0.sigma_x, out);
        summary.insert(name.to_string(), serde_json::to_value(&table.rows).expect("rows serialize"));
    }
    summary.insert("initial_sigma_x_eff".into(), json!(loc0.sigma_x));
    out.json("summary.json", &summary)
}

fn limit_gates(
    cfg: &RunConfig,
    order: LimitOrder,
    table: &LimitTable,
    field0: &WignerField,
    sigma_x0: f64,
    out: &mut Outputs,
) {
    let end = table.rows.last().expect("sequences are non-empty");
    match order {
        LimitOrder::NFirst => {
            out.gates.push(Gate::within(
                "n_first_centroid_at_x0",
                cfg.crystal.x0,
                end.centroid_x,
                2.0 * cfg.grid.dx(),
            ));
            out.gates.push(Gate::below(
                "n_first_sigma_x_shrinks",
                sigma_x0,
                end.sigma_x_eff,
                sigma_x0,
            ));
        }
        // the free-transport checks only apply once ε has reached zero
        LimitOrder::EpsFirst if end.eps == 0.0 => {
            out.gates.push(Gate::at_least(
                "eps_first_sigma_x_grows",
                sigma_x0,
                end.sigma_x_eff,
                sigma_x0,
            ));
            let before = marginals(field0).momentum;
            let after = marginals(&table.endpoint).momentum;
            let diff = before
                .iter()
                .zip(&after)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            out.gates.push(Gate::below("eps_first_momentum_marginal", 0.0, diff, 1e-4));
        }
        LimitOrder::EpsFirst => {}
    }
}
