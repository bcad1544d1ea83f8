use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iscap_cli::{dump_design, run_sweep, CliError, Config};
use iscap_core::ao_driver::{scheme_scenario, SchemeId};
use iscap_core::scenario::Dimensions;

/// Power-minimising hybrid beamforming with RF-chain and phase-shifter on/off control.
#[derive(Parser, Debug)]
#[command(name = "iscap", version)]
struct Cli {
    /// TOML config file; built-in desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the full-size array (32 antennas, 16 RF chains). Slow.
    #[arg(long, global = true)]
    full_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the threshold sweep from the config's [sweep] table and write CSV.
    Sweep {
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one instance and write per-antenna power, the phase-shifter grid and a JSON report.
    Dump {
        #[arg(long, default_value = "joint")]
        scheme: SchemeId,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the power-amplifier efficiency exponent.
        #[arg(long)]
        beta_pa: Option<f64>,
        /// Output prefix; writes <prefix>.antennas.csv, <prefix>.mask.txt and <prefix>.report.json.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if cli.full_scale {
        eprintln!("warning: full-size array; each analog stage solves a 512x512 semidefinite program and a sweep can take hours");
        cfg.scenario.dimensions = Dimensions::full_size();
    }
    let opts = cfg.solver.ao_options();
    match cli.command {
        Command::Sweep { out } => {
            let spec = cfg.sweep.ok_or_else(|| CliError::Usage("the config has no [sweep] table".into()))?;
            let outcome = run_sweep(&spec, &cfg.scenario, &opts, &out)?;
            eprintln!("{} of {} cells feasible; wrote {}", outcome.feasible_rows(), outcome.rows.len(), out.display());
            Ok(outcome.exit_code())
        }
        Command::Dump { scheme, seed, beta_pa, out } => {
            if let Some(b) = beta_pa {
                cfg.scenario.hardware.beta_pa = b;
            }
            let scn = cfg.scenario.build(seed, &cfg.scenario.thresholds)?;
            let (result, files) = dump_design(&scn, scheme, &opts, &out)?;
            let scn = scheme_scenario(&scn, scheme);
            eprintln!(
                "{scheme}: total {:.6} W at beta_pa = {}; wrote {}, {} and {}",
                result.total_w().unwrap_or(f64::NAN),
                scn.hw.beta_pa,
                files.antennas_csv.display(),
                files.mask_grid.display(),
                files.report_json.display()
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
