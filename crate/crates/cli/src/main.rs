use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forecast_attack::data::{read_windows_csv, sample_random_arima, write_windows_csv, SeriesWindow};
use forecast_attack::harness::config::ExperimentConfig;
use forecast_attack::harness::experiment::{
    build_constraints, run_constraint_experiment, run_cost_experiment, ScenarioStats,
};
use forecast_attack::harness::{emit_report, jacobian_selftest};
use forecast_attack::{
    cost_attack, iterated_attack, single_step_attack, AttackResult, BatchForm, Error,
    IterationSettings, Result, SystemSpec, TargetFunction,
};

/// Adversarial forecast perturbations against LQR/MPC controllers.
#[derive(Parser, Debug)]
#[command(name = "forecast-attack", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate random ARIMA(2,1,2) windows.
    GenArima {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack every window of a series file.
    #[command(subcommand)]
    Attack(AttackCommand),
    /// Run a full experiment and write its report.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Self-checks.
    #[command(subcommand)]
    Check(CheckCommand),
}

#[derive(Args, Debug)]
struct AttackIo {
    /// Experiment config supplying the system (default: the scalar battery
    /// system with the horizon taken from the input windows).
    #[arg(long)]
    config: Option<PathBuf>,
    /// L2 perturbation budget.
    #[arg(long)]
    delta: f64,
    /// Input windows (`window_id,t,value`).
    #[arg(long = "in")]
    input: PathBuf,
    /// Attacked windows, same layout as the input.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum AttackCommand {
    /// Closed-form worst-case cost attack on the unconstrained controller.
    Cost(AttackIo),
    /// Gradient attack on a constraint target through the constrained controller.
    Constraint {
        #[arg(long, value_parser = parse_target)]
        target: TargetFunction,
        /// Iterations of projected ascent; overrides the config's attack mode.
        #[arg(long)]
        steps: Option<usize>,
        /// Ascent step length (default δ/10).
        #[arg(long)]
        step_size: Option<f64>,
        #[command(flatten)]
        io: AttackIo,
    },
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ExperimentCommand {
    Cost(ExperimentArgs),
    Constraint(ExperimentArgs),
}

#[derive(Subcommand, Debug)]
enum CheckCommand {
    /// Compare the implicit solution Jacobian with finite differences.
    Jacobian {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

fn parse_target(name: &str) -> std::result::Result<TargetFunction, String> {
    name.parse::<TargetFunction>().map_err(|e| e.to_string())
}

/// Failure that is not a library error, such as a failed self-check.
enum Failure {
    Lib(Error),
    Oracle(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Oracle(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::GenArima {
            seed,
            count,
            horizon,
            out,
        } => {
            let windows = sample_random_arima(seed, horizon, count)?;
            write_windows_csv(&out, &windows)?;
            println!("wrote {count} windows of length {horizon} to {}", out.display());
        }
        Command::Attack(AttackCommand::Cost(io)) => {
            let (cfg, windows) = load_attack_inputs(&io)?;
            let spec = attack_system(cfg.as_ref(), &windows)?;
            let batch = BatchForm::new(&spec)?;
            let mut attacked = Vec::with_capacity(windows.len());
            for (i, w) in windows.iter().enumerate() {
                let res = cost_attack(&batch, &w.values, io.delta)?;
                println!(
                    "window {i}: lambda1={} attained={} norm={}",
                    res.eigen.lambda1, res.canonical.attained, res.canonical.norm_used
                );
                attacked.push(with_values(w, res.canonical));
            }
            write_windows_csv(&io.out, &attacked)?;
        }
        Command::Attack(AttackCommand::Constraint {
            target,
            steps,
            step_size,
            io,
        }) => {
            let (cfg, windows) = load_attack_inputs(&io)?;
            let spec = attack_system(cfg.as_ref(), &windows)?;
            let batch = BatchForm::new(&spec)?;
            let cfg = cfg.unwrap_or_else(|| ExperimentConfig::arima_profile(0));
            let cons = build_constraints(&cfg, &spec, &batch, &windows)?;
            let settings = match (steps, step_size) {
                (None, None) => cfg.iteration_settings(),
                _ => Some(IterationSettings {
                    steps: steps.unwrap_or(IterationSettings::default().steps),
                    step_size,
                }),
            };
            let mut attacked = Vec::with_capacity(windows.len());
            for (i, w) in windows.iter().enumerate() {
                let res = match settings {
                    Some(s) => iterated_attack(&batch, &cons, &w.values, io.delta, target, s)?,
                    None => single_step_attack(&batch, &cons, &w.values, io.delta, target)?,
                };
                println!(
                    "window {i}: target={} attained={} norm={} flags={}",
                    target.name(),
                    res.attained,
                    res.norm_used,
                    res.flags_label()
                );
                attacked.push(with_values(w, res));
            }
            write_windows_csv(&io.out, &attacked)?;
        }
        Command::Experiment(which) => {
            let (args, cost) = match &which {
                ExperimentCommand::Cost(a) => (a, true),
                ExperimentCommand::Constraint(a) => (a, false),
            };
            let cfg = ExperimentConfig::load(&args.config)?;
            let stats = if cost {
                run_cost_experiment(&cfg)?
            } else {
                run_constraint_experiment(&cfg)?
            };
            let out_dir = args.out_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
            let files = emit_report(&stats, &cfg, &out_dir)?;
            print_summary(&stats);
            println!("records: {}", files.records.display());
            println!("summary: {}", files.summary.display());
        }
        Command::Check(CheckCommand::Jacobian { seed, instances }) => {
            let report = jacobian_selftest(seed, instances)?;
            println!(
                "compared {} of {} instances ({} skipped), max error {:.3e}, unconstrained max error {:.3e}",
                report.compared.len(),
                report.requested,
                report.skipped.len(),
                report.max_error,
                report.unconstrained_max_error
            );
            if !report.passed() {
                let seeds: Vec<String> = report.failures.iter().map(u64::to_string).collect();
                return Err(Failure::Oracle(format!(
                    "Jacobian mismatch on instance seeds {}",
                    seeds.join(", ")
                )));
            }
            println!("jacobian check passed");
        }
    }
    Ok(())
}

fn load_attack_inputs(io: &AttackIo) -> Result<(Option<ExperimentConfig>, Vec<SeriesWindow>)> {
    let cfg = io.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let windows = read_windows(&io.input)?;
    Ok((cfg, windows))
}

fn read_windows(path: &Path) -> Result<Vec<SeriesWindow>> {
    let windows = read_windows_csv(path)?;
    if windows.is_empty() {
        return Err(Error::Data(format!("{} contains no windows", path.display())));
    }
    Ok(windows)
}

fn attack_system(cfg: Option<&ExperimentConfig>, windows: &[SeriesWindow]) -> Result<SystemSpec> {
    match cfg {
        Some(cfg) => cfg.system_spec(),
        None => SystemSpec::battery_scalar(windows[0].values.len()),
    }
}

fn with_values(window: &SeriesWindow, res: AttackResult) -> SeriesWindow {
    SeriesWindow {
        values: res.s_hat,
        ..window.clone()
    }
}

fn print_summary(stats: &ScenarioStats) {
    for a in &stats.aggregates {
        match a.mean_pct_increase {
            Some(v) => println!(
                "{} delta={} {:?}: mean increase {v:.4}% over {} windows",
                a.scenario.name(),
                a.delta,
                a.metric,
                a.count
            ),
            None => println!("{} delta={} {:?}: no usable windows", a.scenario.name(), a.delta, a.metric),
        }
    }
    for p in &stats.p_values {
        if let Some(v) = p.p_value {
            println!(
                "{} vs random delta={} {:?}: p={v:.3e} (n={})",
                p.scenario.name(),
                p.delta,
                p.metric,
                p.n
            );
        }
    }
}
