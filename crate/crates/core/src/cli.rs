//! Command-line front end: `simulate`, `sweep`, `diagnose` and
//! `constraints-dump`.

use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::solve_equilibrium_gap;
use crate::numkernel::{expm, is_hurwitz, spectral_norm, DenseMatrix};
use crate::observer::synthesize;
use crate::safety::{dump_line, DUMP_HEADER};
use crate::sim::{run, ControllerMode, RunOptions, Simulation};
use crate::sweep::{sweep_delays, write_table, RegionTarget, SweepScenario};

#[derive(Debug, Parser)]
#[command(name = "rstc", version, about = "Delay-robust safety filter for mixed CAV/human platoons")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub scenario: Option<ScenarioArg>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long = "tau-u", global = true)]
    pub tau_u: Option<f64>,
    #[arg(long = "tau-y", global = true)]
    pub tau_y: Option<f64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario, write the trajectory CSV and print a summary.
    Simulate,
    /// Compute safety regions over the configured delay grid.
    Sweep,
    /// Print model, predictor and observer diagnostics.
    Diagnose,
    /// Run one scenario and write every constraint row of every step.
    ConstraintsDump,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ScenarioArg {
    HeadBrake,
    FollowerAccel,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Nominal,
    StcDelayfree,
    RstcFull,
    RstcObserver,
}

impl From<ModeArg> for ControllerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Nominal => ControllerMode::Nominal,
            ModeArg::StcDelayfree => ControllerMode::StcDelayFree,
            ModeArg::RstcFull => ControllerMode::RstcFullState,
            ModeArg::RstcObserver => ControllerMode::RstcObserver,
        }
    }
}

/// Exit status for an error: 2 for configuration problems, 3 for numerical
/// failures of the synthesis, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidInput(_) | Error::NoEquilibrium { .. } => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.scenario {
        cfg.scenario.kind = match s {
            ScenarioArg::HeadBrake => SweepScenario::HeadBrake,
            ScenarioArg::FollowerAccel => SweepScenario::FollowerAccel,
        };
    }
    if let Some(m) = common.mode {
        cfg.controller.mode = m.into();
    }
    if let Some(dir) = &common.out {
        cfg.output.dir = dir.clone();
    }
    if let Some(dt) = common.dt {
        cfg.delays.dt = dt;
    }
    if let Some(t) = common.tau_u {
        cfg.delays.tau_u = t;
    }
    if let Some(t) = common.tau_y {
        cfg.delays.tau_y = t;
    }
    if common.jobs == Some(0) {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg, out),
        Command::Sweep => cmd_sweep(&cfg, cli.common.jobs, out),
        Command::Diagnose => cmd_diagnose(&cfg, out),
        Command::ConstraintsDump => cmd_constraints_dump(&cfg, out),
    }
}

fn create_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output.dir)?;
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let platoon = cfg.platoon_config()?;
    let scenario = cfg.scenario_spec();
    let mode = cfg.controller.mode;
    let log = run(&platoon, &scenario, mode)?;
    create_out_dir(cfg)?;
    let path = cfg.output.dir.join(&cfg.output.trajectory);
    log.save_csv(&path)?;

    let s = log.summary();
    writeln!(out, "scenario   {}", cfg.scenario.kind)?;
    writeln!(out, "mode       {mode}")?;
    match s.collision {
        Some(c) => writeln!(out, "collision  t = {:.2} s, vehicle {}", c.t, RegionTarget::Vehicle(c.vehicle))?,
        None => writeln!(out, "collision  none")?,
    }
    writeln!(out, "min h      {:.4} m", s.min_h)?;
    writeln!(out, "min gap    {:.4} m", s.min_gap)?;
    writeln!(out, "max |u|    {:.4} m/s^2", s.max_abs_u)?;
    writeln!(out, "trajectory {}", path.display())?;
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig, jobs: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let platoon = cfg.sweep_platoon_config()?;
    let sw = &cfg.sweep;
    let grid_points = sw.scenarios.len() * sw.modes.len() * sw.taus.len();
    let threads = jobs.unwrap_or_else(|| {
        let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        hw.min(grid_points)
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    let settings = cfg.sweep_settings();
    let results = pool.install(|| sweep_delays(&platoon, &sw.scenarios, &sw.modes, &sw.taus, &settings))?;

    create_out_dir(cfg)?;
    let path = cfg.output.dir.join(&cfg.output.sweep);
    write_table(&results, std::fs::File::create(&path)?)?;
    write_table(&results, &mut *out)?;

    // the nominal region is expected, not guaranteed, to shrink with delay
    for &scenario in &sw.scenarios {
        let durations: Vec<f64> = results
            .iter()
            .filter(|r| r.scenario == scenario && r.mode == ControllerMode::Nominal)
            .map(|r| r.chain().safe_duration)
            .collect();
        if durations.len() > 1 {
            let monotone = durations.windows(2).all(|w| w[1] <= w[0] + 1e-9);
            writeln!(out, "# {scenario}: nominal chain region non-increasing in tau_u: {monotone}")?;
        }
    }
    writeln!(out, "# table written to {}", path.display())?;
    Ok(())
}

pub fn cmd_diagnose(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let pc = cfg.platoon_config()?;
    let platoon = pc.platoon()?;
    let m = platoon.matrices();
    let eq = solve_equilibrium_gap(pc.v_star, &pc.drivers[0])?;
    let c = pc.reference_coeffs(&platoon);
    writeln!(out, "equilibrium gap s*   {:.6} m at v* = {} m/s", eq.s_star, pc.v_star)?;
    writeln!(out, "linearisation        a1 = {:.6}, a2 = {:.6}, a3 = {:.6}", c.a1, c.a2, c.a3)?;
    let nus: Vec<String> = (1..=pc.followers).map(|i| format!("{:.4}", pc.safety.nu(i))).collect();
    writeln!(out, "nu_i                 [{}]", nus.join(", "))?;
    let gain: Vec<String> = pc.nominal_gain(&platoon).iter().map(|k| format!("{k:.4}")).collect();
    writeln!(out, "nominal gain K       [{}]", gain.join(", "))?;

    let transition = expm(&m.a, pc.tau_u)?;
    writeln!(out, "||e^(A tau_u)||_2    {:.6}", spectral_norm(&transition)?)?;
    let ad = (&m.a * &m.d).amax();
    let ed = (&transition * &m.d - &m.d).amax();
    let verdict = |dev: f64| if dev <= 1e-10 { "PASS" } else { "FAIL" };
    writeln!(out, "check A D = 0        {} (max deviation {ad:.3e})", verdict(ad))?;
    writeln!(out, "check e^(A tau_u) D = D  {} (max deviation {ed:.3e})", verdict(ed))?;

    let n = m.n;
    let ny = m.output_dim();
    let design = synthesize(
        &m,
        &[0.0, pc.tau_y],
        &(DenseMatrix::identity(n, n) * pc.observer_q),
        &(DenseMatrix::identity(ny, ny) * pc.observer_r),
    )?;
    let closed = &m.a - &design.gain * &design.cbar;
    writeln!(
        out,
        "observer A - L Cbar  {} (Riccati: {} iterations, residual {:.3e})",
        if is_hurwitz(&closed) { "Hurwitz (Lyapunov certified)" } else { "NOT Hurwitz" },
        design.riccati_iterations,
        design.riccati_residual
    )?;
    writeln!(
        out,
        "decay certificate    Upsilon = {:.6}, lambda = {:.6}",
        design.certificate.upsilon, design.certificate.lambda
    )?;
    Ok(())
}

pub fn cmd_constraints_dump(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let platoon = cfg.platoon_config()?;
    let mode = cfg.controller.mode;
    if mode == ControllerMode::Nominal {
        return Err(Error::Config("the nominal controller has no constraints to dump; choose a filtered mode".into()));
    }
    let mut sim = Simulation::new(&platoon, &cfg.scenario_spec(), mode, RunOptions::default())?;
    create_out_dir(cfg)?;
    let path = cfg.output.dir.join(&cfg.output.constraints);
    let mut file = io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(file, "{DUMP_HEADER}")?;
    let mut lines = 0usize;
    while !sim.is_finished() {
        let rec = sim.step()?;
        for (c, active) in &rec.constraints {
            writeln!(file, "{}", dump_line(rec.t, c, *active))?;
            lines += 1;
        }
    }
    file.flush()?;
    writeln!(out, "{lines} constraint rows written to {}", path.display())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::RiccatiDiverged { iterations: 200, residual: 1.0 }), 3);
        assert_eq!(exit_code(&Error::NotHurwitz("x".into())), 3);
        assert_eq!(exit_code(&Error::Io(io::Error::other("disk"))), 1);
    }

    #[test]
    fn overrides_apply_on_top_of_the_file() {
        let common = CommonArgs {
            mode: Some(ModeArg::StcDelayfree),
            scenario: Some(ScenarioArg::FollowerAccel),
            tau_u: Some(0.2),
            ..CommonArgs::default()
        };
        let cfg = resolve_config(&common).unwrap();
        assert_eq!(cfg.controller.mode, ControllerMode::StcDelayFree);
        assert_eq!(cfg.scenario.kind, SweepScenario::FollowerAccel);
        assert_eq!(cfg.delays.tau_u, 0.2);
        assert!(resolve_config(&CommonArgs { jobs: Some(0), ..CommonArgs::default() }).is_err());
    }

    #[test]
    fn arguments_parse() {
        let cli = Cli::try_parse_from(["rstc", "sweep", "--jobs", "3", "--tau-y", "0.4"]).unwrap();
        assert!(matches!(cli.command, Command::Sweep));
        assert_eq!(cli.common.jobs, Some(3));
        assert_eq!(cli.common.tau_y, Some(0.4));
        assert!(Cli::try_parse_from(["rstc", "simulate", "--mode", "theorem"]).is_err());
    }
}
