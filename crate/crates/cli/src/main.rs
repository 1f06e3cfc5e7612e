use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ncbf_core::artifacts;
use ncbf_core::config::RunConfig;
use ncbf_core::dynamics::{ControlAffineSystem, SystemRegistry};
use ncbf_core::trainer::{alpha_epsilon_curve, RunStatus};
use ncbf_core::{Error, MlpCertificate};

const OUT_ENV: &str = "NCBF_OUT_DIR";
const BUDGET_EXHAUSTED: u8 = 2;

#[derive(Parser)]
#[command(name = "ncbf", version, about = "Train, certify and deploy neural control barrier functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and conformally refine a certificate.
    Train(RunArgs),
    /// Quantify an existing certificate.
    Verify(CertArgs),
    /// Roll out the safety filter from random safe states.
    Simulate(CertArgs),
    /// Evaluate the certificate on a 2-D slice.
    Levelset(CertArgs),
    /// Tabulate epsilon over a range of alpha for each (N, beta).
    Curve(CurveArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory. Defaults to `output.dir`, then `$NCBF_OUT_DIR/<system>/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CertArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    cert: PathBuf,
}

#[derive(Args)]
struct CurveArgs {
    /// Verification sample counts.
    #[arg(long = "n", value_delimiter = ',', required = true)]
    n_samples: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.001")]
    beta: Vec<f64>,
    #[arg(long, default_value_t = 0.001)]
    alpha_min: f64,
    #[arg(long, default_value_t = 0.1)]
    alpha_max: f64,
    /// Number of alpha values; 0 writes only the header.
    #[arg(long, default_value_t = 100)]
    alpha_steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn output_dir(args: &RunArgs, config: &RunConfig, command: &str) -> PathBuf {
    args.out
        .clone()
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| out_root().join(&config.train.system).join(command))
}

/// Loads and validates the whole configuration before anything is written.
fn load(args: &RunArgs) -> Result<(RunConfig, ControlAffineSystem), Error> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let sys = config.validate(&SystemRegistry::with_builtins())?;
    Ok((config, sys))
}

fn load_cert(path: &Path) -> Result<MlpCertificate, Error> {
    MlpCertificate::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config { path: path.display().to_string(), message: format!("cannot read certificate: {io}") },
        other => other,
    })
}

fn train(args: &RunArgs) -> Result<u8, Error> {
    let (config, sys) = load(args)?;
    let dir = output_dir(args, &config, "train");
    let out = artifacts::train_to_dir(&config, &sys, &dir)?;
    let r = &out.report;
    println!(
        "{}: q = {:e}, epsilon = {}, alpha = {}, beta = {}, {} phases -> {}",
        match out.status {
            RunStatus::Certified => "certified",
            RunStatus::BudgetExhausted => "budget exhausted",
        },
        r.quantile,
        r.epsilon,
        r.alpha,
        r.beta,
        out.history.refinements.len(),
        dir.display()
    );
    Ok(match out.status {
        RunStatus::Certified => 0,
        RunStatus::BudgetExhausted => BUDGET_EXHAUSTED,
    })
}

fn with_cert<T>(
    args: &CertArgs,
    command: &str,
    run: impl FnOnce(&RunConfig, &ControlAffineSystem, &MlpCertificate, &Path) -> Result<T, Error>,
) -> Result<(T, PathBuf), Error> {
    let (config, sys) = load(&args.run)?;
    let cert = load_cert(&args.cert)?;
    let dir = output_dir(&args.run, &config, command);
    Ok((run(&config, &sys, &cert, &dir)?, dir))
}

fn verify(args: &CertArgs) -> Result<u8, Error> {
    let (r, dir) = with_cert(args, "verify", artifacts::verify_to_dir)?;
    println!(
        "q = {:e} ({}), epsilon = {}, alpha = {}, beta = {}, N = {} -> {}",
        r.quantile,
        if r.certified() { "certified" } else { "not certified" },
        r.epsilon,
        r.alpha,
        r.beta,
        r.n_samples,
        dir.display()
    );
    Ok(0)
}

fn simulate(args: &CertArgs) -> Result<u8, Error> {
    let (s, dir) = with_cert(args, "simulate", artifacts::simulate_to_dir)?;
    println!("safety rate {} ({}/{}) -> {}", s.rate, s.n_safe, s.n_rollouts, dir.display());
    Ok(0)
}

fn levelset(args: &CertArgs) -> Result<u8, Error> {
    let (g, dir) = with_cert(args, "levelset", artifacts::levelset_to_dir)?;
    println!("{}x{} grid -> {}", g.slice.resolution, g.slice.resolution, dir.display());
    Ok(0)
}

fn curve(args: &CurveArgs) -> Result<u8, Error> {
    for &b in &args.beta {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::Config { path: "beta".into(), message: format!("must lie in (0, 1), got {b}") });
        }
    }
    if args.n_samples.contains(&0) {
        return Err(Error::Config { path: "n".into(), message: "sample counts must be positive".into() });
    }
    let (lo, hi) = (args.alpha_min, args.alpha_max);
    if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
        return Err(Error::Config {
            path: "alpha-min, alpha-max".into(),
            message: format!("need 0 < alpha-min <= alpha-max < 1, got [{lo}, {hi}]"),
        });
    }
    let alphas: Vec<f64> = match args.alpha_steps {
        0 => vec![],
        1 => vec![lo],
        s => (0..s).map(|i| lo + (hi - lo) * i as f64 / (s - 1) as f64).collect(),
    };
    let dir = args.out.clone().unwrap_or_else(|| out_root().join("curve"));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("curve.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["n_samples", "beta", "alpha", "epsilon", "error"])?;
    for &n in &args.n_samples {
        for &beta in &args.beta {
            for p in alpha_epsilon_curve(n, beta, &alphas) {
                w.write_record([
                    p.n_samples.to_string(),
                    p.beta.to_string(),
                    p.alpha.to_string(),
                    p.epsilon.map(|e| e.to_string()).unwrap_or_default(),
                    p.error.unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush()?;
    println!("{}", path.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Verify(a) => verify(a),
        Command::Simulate(a) => simulate(a),
        Command::Levelset(a) => levelset(a),
        Command::Curve(a) => curve(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
