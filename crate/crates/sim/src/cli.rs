//! `upf` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::export::{export_run, read_run, write_fields};
use crate::run::{host_environment, run, SafetyReport};
use crate::scenario::{load_with_overrides, Scenario};
use crate::SimError;

const SCHEMA_HELP: &str = "\
Scenario keys (TOML; dotted paths work with --set and sweep --key):
  name, seed, dt_s, duration_s, lane_width_m, n_lanes, vehicle_width_m,
  mode (replan_every_step | plan_once), snapshot_stride
  grid.{s_min_m, s_max_m, d_min_m, d_max_m, n_s, n_d}
  dynamics.{sigma_w, a_max_mps3, omega_max_mps3, accel_max_mps2}
  fields.{tikhonov_b, tikhonov_r, v_max_mps, cg_tol, cg_max_iter, spread_sources}
  fusion.{gamma1..gamma5, alpha1, alpha2, epsilon_cells, tau, max_steps,
          steady_tol, stabilization, temperature}
  planner.{horizon_steps, replan_every_steps, preview_step, max_iterations,
           w2_tol_m, eta, max_sweeps, update_tol, lane_selection,
           corridor_behind_m, corridor_ahead_m, drift_gain, scripted_svs}
  styles.<conservative|cooperative|aggressive>.{alpha_b, alpha_r, lambda_b_m,
           lambda_r_m, sigma_b_m, sigma_r_m, r_s, r_d, target_speed_mps,
           terminal_lane_weight, terminal_speed_weight, penalty_weight}
  vehicles.<index>.{id, host, style, s_m, lane, speed_mps}
Lanes are numbered from the rightmost (0); lane centres are symmetric about d = 0.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 1 other errors.";

#[derive(Debug, Parser)]
#[command(name = "upf", version, about = "Unified potential field planner simulator", after_long_help = SCHEMA_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and export all artifacts.
    Run(RunArgs),
    /// Export benefit, risk and unified fields of the initial configuration.
    Fields(FieldsArgs),
    /// Summarize an exported run.
    Report(ReportArgs),
    /// Run once per value of one dotted key.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario TOML file (`presets/lane_change.toml` resolves to the bundled
    /// preset when the file is absent).
    #[arg(long)]
    pub scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-key override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Field snapshot stride in steps.
    #[arg(long)]
    pub stride: Option<usize>,
    /// `replan_every_step` or `plan_once`.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct FieldsArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory written by `run`.
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub key: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub values: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn split_override(raw: &str) -> Result<(String, String), SimError> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| SimError::Parse(format!("override `{raw}` is not KEY=VALUE")))
}

fn load(args: &ScenarioArgs, extra: &[(String, String)]) -> Result<Scenario, SimError> {
    let mut overrides: Vec<(String, String)> = args
        .overrides
        .iter()
        .map(|o| split_override(o))
        .collect::<Result<_, _>>()?;
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    overrides.extend_from_slice(extra);
    load_with_overrides(&args.scenario, &overrides)
}

fn execute_run(sc: &Scenario, out: &Path) -> Result<SafetyReport, SimError> {
    match run(sc, sc.mode) {
        Ok(log) => {
            export_run(&log, out)?;
            Ok(log.safety())
        }
        Err(failure) => {
            // Keep whatever was logged before the failure.
            let _ = export_run(&failure.partial, out);
            Err(failure.error)
        }
    }
}

fn cmd_run(a: &RunArgs) -> Result<(), SimError> {
    let mut extra = Vec::new();
    if let Some(stride) = a.stride {
        extra.push(("snapshot_stride".to_string(), stride.to_string()));
    }
    if let Some(mode) = &a.mode {
        extra.push(("mode".to_string(), mode.clone()));
    }
    let sc = load(&a.scenario, &extra)?;
    let safety = execute_run(&sc, &a.out)?;
    println!(
        "{}: {} steps, min separation {:.2} m -> {}",
        sc.name,
        sc.n_steps(),
        safety.min_separation_m,
        a.out.display()
    );
    Ok(())
}

fn cmd_fields(a: &FieldsArgs) -> Result<(), SimError> {
    let sc = load(&a.scenario, &[])?;
    let states: Vec<_> = sc.vehicles.iter().map(|v| sc.initial_state(v)).collect();
    let env = host_environment(&sc, &states)?;
    std::fs::create_dir_all(&a.out).map_err(|source| SimError::Io {
        path: a.out.display().to_string(),
        source,
    })?;
    write_fields(
        &a.out,
        ["benefit.csv", "risk.csv", "unified.csv"],
        [&env.fields.benefit, &env.fields.risk, &env.unified.phi],
    )?;
    println!(
        "fields for {} written to {} (CH steps {}, residual {:.3e})",
        sc.name,
        a.out.display(),
        env.unified.steps_taken,
        env.unified.residual
    );
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<(), SimError> {
    let art = read_run(&a.run_dir)?;
    let s = &art.safety;
    let dt = match art.steps.as_slice() {
        [a, b, ..] => b.t_s - a.t_s,
        _ => 0.0,
    };
    let recomputed = SafetyReport::from_records(&art.steps, dt);
    println!("run: {}", a.run_dir.display());
    println!("steps: {}", art.steps.len());
    println!("min separation (host): {:.3} m", s.min_separation_m);
    println!("min separation (any pair): {:.3} m", s.min_pairwise_separation_m);
    println!("time below {} m: {:.1} s", s.warning_m, s.time_below_15m_s);
    println!("time below {} m: {:.1} s", s.critical_m, s.time_below_8m_s);
    if !art.steps.is_empty() && recomputed.min_separation_m != s.min_separation_m {
        println!("warning: safety.json disagrees with steps.jsonl ({:.3} m)", recomputed.min_separation_m);
    }
    let solves: Vec<_> = art.convergence.iter().filter(|r| r.iteration == 1).collect();
    let converged = art
        .convergence
        .iter()
        .filter(|r| r.converged)
        .map(|r| (r.step, r.converged))
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    println!("fixed-point solves: {} ({} converged)", solves.len(), converged);
    if let Some(first) = solves.first() {
        let gaps: Vec<String> = art
            .convergence
            .iter()
            .filter(|r| r.step == first.step)
            .map(|r| format!("{:.3e}", r.w2_gap))
            .collect();
        println!("first solve W2 gaps: [{}]", gaps.join(", "));
        match first.rho_hat {
            Some(r) => println!("first solve rho_hat: {r:.4}"),
            None => println!("first solve rho_hat: n/a"),
        }
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), SimError> {
    if a.values.is_empty() {
        return Err(SimError::Parse("sweep needs at least one value".into()));
    }
    for value in &a.values {
        let sc = load(&a.scenario, &[(a.key.clone(), value.clone())])?;
        let dir = a.out.join(format!("{}={}", a.key, value.trim()));
        let safety = execute_run(&sc, &dir)?;
        println!("{}={}: min separation {:.2} m", a.key, value.trim(), safety.min_separation_m);
    }
    Ok(())
}

/// Parse `argv` (program name first) and run the command; returns the exit
/// code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Fields(a) => cmd_fields(a),
        Command::Report(a) => cmd_report(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
