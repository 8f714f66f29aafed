use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hetpf::harness::{
    emit_convergence, emit_results, emit_sweep, parse_config, parse_convergence_config, run_convergence_study,
    run_sweep, run_twin_experiment, write_convergence, write_results, write_sweep, ConvergenceConfig, ExperimentConfig,
    ExperimentResult,
};

#[derive(Parser)]
#[command(name = "hetpf", version, about = "Hybrid ETPF/ESRF twin experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single twin experiment.
    Run(ExperimentArgs),
    /// Run the grid given in the config's [sweep] section.
    Sweep(ExperimentArgs),
    /// Single-step convergence study with a bimodal prior.
    Converge(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV output path; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the cycle and repeat counts of the published runs.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of assimilation cycles, spin-up included.
    #[arg(long)]
    cycles: Option<usize>,
    /// Model defaults to use without a config file.
    #[arg(long, default_value = "lorenz63", value_parser = ["lorenz63", "lorenz96", "coupled"])]
    model: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn experiment_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.common.config {
        Some(p) => parse_config(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => ExperimentConfig::defaults(&args.model)?,
    };
    if args.common.paper_scale {
        cfg.paper_scale();
    }
    if let Some(n) = args.cycles {
        cfg.cycles = n;
        cfg.spin_up = cfg.spin_up.min(n.saturating_sub(1));
    }
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes CSV to `--out` or stdout and returns where the summary should go.
fn emit<F, G>(out: &Option<PathBuf>, to_file: F, to_stdout: G) -> Result<Box<dyn Write>>
where
    F: FnOnce(&Path) -> hetpf::Result<()>,
    G: FnOnce(io::StdoutLock<'static>) -> hetpf::Result<()>,
{
    match out {
        Some(p) => {
            to_file(p).with_context(|| format!("writing {}", p.display()))?;
            Ok(Box::new(io::stdout()))
        }
        None => {
            to_stdout(io::stdout().lock())?;
            Ok(Box::new(io::stderr()))
        }
    }
}

fn summary(w: &mut dyn Write, label: &str, r: &ExperimentResult) -> Result<bool> {
    writeln!(
        w,
        "{label}rmse={} cycles={} spin_up={} wall_time={:.3}s",
        r.rmse,
        r.records.len(),
        r.spin_up,
        r.wall_time.as_secs_f64()
    )?;
    if let Some(d) = &r.divergence {
        eprintln!("{label}filter diverged at cycle {}: {}", d.cycle, d.reason);
        return Ok(false);
    }
    Ok(true)
}

fn run(args: ExperimentArgs) -> Result<bool> {
    let cfg = experiment_config(&args)?;
    let result = run_twin_experiment(&cfg)?;
    let mut w = emit(
        &args.common.out,
        |p| emit_results(&result, p),
        |s| write_results(&result, s),
    )?;
    summary(w.as_mut(), "", &result)
}

fn sweep(args: ExperimentArgs) -> Result<bool> {
    let cfg = experiment_config(&args)?;
    if cfg.sweep.is_empty() {
        bail!("config has no [sweep] lists");
    }
    let outcomes = run_sweep(&cfg)?;
    let mut w = emit(
        &args.common.out,
        |p| emit_sweep(&outcomes, &cfg.sweep, p),
        |s| write_sweep(&outcomes, &cfg.sweep, s),
    )?;
    let mut ok = true;
    for o in &outcomes {
        let mut label = String::new();
        if let Some(a) = o.job.alpha {
            label += &format!("alpha={a} ");
        }
        if let Some(t) = o.job.theta {
            label += &format!("theta={t} ");
        }
        if let Some(m) = o.job.ensemble_size {
            label += &format!("ensemble_size={m} ");
        }
        if let Some(s) = o.job.seed {
            label += &format!("seed={s} ");
        }
        ok &= summary(w.as_mut(), &label, &o.result)?;
    }
    Ok(ok)
}

fn converge(args: CommonArgs) -> Result<bool> {
    let mut cfg = match &args.config {
        Some(p) => parse_convergence_config(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => ConvergenceConfig::default(),
    };
    if args.paper_scale {
        cfg.paper_scale();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let rows = run_convergence_study(&cfg)?;
    let mut w = emit(
        &args.out,
        |p| emit_convergence(&rows, p),
        |s| write_convergence(&rows, s),
    )?;
    for r in &rows {
        writeln!(
            w,
            "ensemble_size={} optimal_alpha={} rmse={}",
            r.ensemble_size, r.optimal_alpha, r.rmse
        )?;
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Converge(a) => converge(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
