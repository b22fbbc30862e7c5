use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use suvlab_cli::{parse_config, run, threads_from_env, CliError, Format, Subcommand, EXIT_GATE_FAIL, EXIT_PASS};

/// Spontaneous unitarity violation collapse experiments.
#[derive(Debug, Parser)]
#[command(name = "suvlab", version)]
struct Args {
    subcommand: Subcommand,
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set noise.tau_t=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "suvlab-out")]
    out: PathBuf,
    /// Overrides `format` in the config.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

fn execute(args: &Args) -> Result<i32, CliError> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let mut cfg = parse_config(&args.config, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(format) = args.format {
        cfg.format = format;
    }
    let manifest = run(args.subcommand, &cfg, &args.out)?;
    for gate in &manifest.gates {
        log::info!(
            "gate {}: expected {} empirical {} threshold {} -> {}",
            gate.name,
            gate.expected,
            gate.empirical,
            gate.threshold,
            if gate.pass { "pass" } else { "FAIL" }
        );
    }
    Ok(if manifest.all_gates_pass {
        EXIT_PASS
    } else {
        EXIT_GATE_FAIL
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let code = match execute(&args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("suvlab: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
