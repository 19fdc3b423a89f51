use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fpdiff::experiments::{
    accuracy_for_setup, overheads, parse_estimators, parse_sizes, records_to_csv, run_accuracy, run_bilevel,
    run_timing, selftest, setup_from_instance, timing_to_csv, Experiment, ExperimentConfig,
};
use fpdiff::problems::{InstanceFile, StepRule};
use fpdiff::Error;

/// Derivatives of fixed points of iterative algorithms
#[derive(Parser, Debug)]
#[command(name = "fpdiff", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Jacobian error against ground truth over a geometric grid of iterations
    Accuracy(Common),
    /// Median wall time of solve and solve + estimator phases
    Timing(Common),
    /// Hypergradient descent runs, with criticality certificates on the quadratic toy
    Bilevel(Common),
    /// Perturbation identity and finite-difference consistency checks
    Selftest(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// newton_logistic, ip_qp, ridge_gd, quadratic_synthetic or bilevel_ridge
    #[arg(long, default_value = "ridge_gd")]
    experiment: String,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Size tuples such as 50x8,100x10 (N x n; n; or n x m_eq x p for ip_qp)
    #[arg(long)]
    sizes: Option<String>,

    /// Comma-separated subset of autodiff, implicit, onestep, kstep
    #[arg(long)]
    estimators: Option<String>,

    /// Inner iterations
    #[arg(long)]
    k: Option<usize>,

    /// Truncation window K for kstep
    #[arg(long = "window", value_name = "K")]
    window: Option<usize>,

    /// Condition number target of synthetic instances
    #[arg(long)]
    cond: Option<f64>,

    /// Step size rule: inv_L or two_over_muL
    #[arg(long)]
    alpha: Option<String>,

    /// Output CSV path (stdout when omitted)
    #[arg(long = "out", value_name = "PATH")]
    out: Option<PathBuf>,

    /// Timing repetitions (median reported)
    #[arg(long)]
    reps: Option<usize>,

    /// Outer steps of hypergradient descent
    #[arg(long)]
    outer_steps: Option<usize>,

    /// Instance file to use instead of a synthetic instance (accuracy only)
    #[arg(long)]
    instance: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let experiment: Experiment = self.experiment.parse()?;
        let mut c = ExperimentConfig::new(experiment);
        c.seed = self.seed;
        if let Some(s) = &self.sizes {
            c.sizes = parse_sizes(s)?;
        }
        if let Some(e) = &self.estimators {
            c.estimators = parse_estimators(e)?;
        }
        if let Some(k) = self.k {
            c.k = k;
        }
        c.window = self.window;
        if let Some(cond) = self.cond {
            c.cond = cond;
        }
        if let Some(a) = &self.alpha {
            c.alpha = a.parse::<StepRule>()?;
        }
        c.output = self.out.clone();
        if let Some(r) = self.reps {
            c.reps = r;
        }
        if let Some(s) = self.outer_steps {
            c.outer_steps = s;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Accuracy(args) => {
            let config = args.config()?;
            let records = match &args.instance {
                Some(path) => {
                    let (setup, truth) = setup_from_instance(&InstanceFile::read(path)?)?;
                    accuracy_for_setup(&config, &setup, &truth)?
                }
                None => run_accuracy(&config)?,
            };
            records_to_csv(&records).emit(config.output.as_deref())?;
        }
        Command::Timing(args) => {
            let config = args.config()?;
            let records = run_timing(&config)?;
            if let Some((ad, id, os)) = overheads(&records) {
                log::info!("overheads at largest size: autodiff {ad:e}s, implicit {id:e}s, onestep {os:e}s");
            }
            timing_to_csv(&records).emit(config.output.as_deref())?;
        }
        Command::Bilevel(args) => {
            let config = args.config()?;
            let report = run_bilevel(&config)?;
            report.runs_csv().emit(config.output.as_deref())?;
            if !report.certificates.is_empty() {
                let path = config.output.as_ref().map(|p| p.with_extension("certificate.csv"));
                report.certificates_csv().emit(path.as_deref())?;
            }
        }
        Command::Selftest(args) => {
            let results = selftest(args.seed);
            let mut failed = 0;
            for r in &results {
                println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                eprintln!("{failed} self-test check(s) failed");
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
