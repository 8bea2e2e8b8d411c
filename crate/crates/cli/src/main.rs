use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rjhmc_tree::config::{ConfigFile, DataSource, RunConfig};
use rjhmc_tree::data::{synth_cgm, CgmConfig, Dataset};
use rjhmc_tree::experiment::{self, write_json};
use rjhmc_tree::gradcheck;
use rjhmc_tree::model::Variant;

#[derive(Parser)]
#[command(name = "rjhmc-tree", version, about = "Reversible-jump HMC for Bayesian decision trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run independent chains and write traces, a report and a manifest.
    Run(RunArgs),
    /// Write synthetic CGM train/test CSV files.
    Synth(SynthArgs),
    /// Check analytical gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// hmc-df or hmc-dfi.
    #[arg(long)]
    method: Option<Variant>,
    /// Named hyperparameter profile (cgm, iris, wisconsin, wine, raisin).
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restarts run concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// NUTS transitions per block.
    #[arg(long)]
    k: Option<usize>,
    /// Warm-up transitions per adaptation during burn-in.
    #[arg(long)]
    warmup: Option<usize>,
    /// Training CSV (replaces the synthetic data source).
    #[arg(long, requires = "target")]
    train: Option<PathBuf>,
    /// Test CSV; without it the training file is split.
    #[arg(long, requires = "train")]
    test: Option<PathBuf>,
    /// Output column of the CSV files.
    #[arg(long)]
    target: Option<String>,
    /// Treat the CSV target as real-valued.
    #[arg(long)]
    regression: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 800)]
    n_train: usize,
    #[arg(long, default_value_t = 800)]
    n_test: usize,
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "cgm")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per method and task.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    max_internal: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(a) => run(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => Ok(gradcheck_cmd(a)),
    }
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let mut file = match &a.config {
        Some(p) => ConfigFile::read(p)?,
        None => ConfigFile::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag.clone() { file.$field = Some(v); })*
        };
    }
    set!(method => method, profile => profile, iters => iterations, burnin => burnin, restarts => restarts,
         seed => seed, out => out, jobs => jobs, k => k, warmup => warmup);
    if let (Some(train), Some(target)) = (&a.train, &a.target) {
        use rjhmc_tree::data::{CsvSchema, Task};
        let task = if a.regression { Task::Regression } else { Task::Classification };
        file.data = Some(DataSource::Csv {
            train: train.clone(),
            test: a.test.clone(),
            train_fraction: 0.7,
            schema: CsvSchema { target: target.clone(), features: None, task },
        });
    }
    let cfg = RunConfig::resolve(file).context("invalid configuration")?;
    let base = std::env::current_dir()?;
    let report = experiment::run(&cfg, &base)?;
    let out = base.join(&cfg.out);
    if let Some(s) = &report.summary {
        println!(
            "{} {}: test {} {:.5} ± {:.5} (ensemble {:.5}), leaves {:.2}, acceptance {:.2}%",
            report.method,
            report.profile,
            s.metric,
            s.test_metric.mean,
            s.test_metric.sd,
            s.test_metric_ensemble.mean,
            s.ave_leaves.mean,
            s.acceptance_rate.mean
        );
    }
    for note in &report.notes {
        println!("note: {note}");
    }
    println!("wrote {}", out.display());
    let failed = report.chains.iter().filter(|c| c.error.is_some()).count();
    Ok(if failed == 0 && report.summary.is_some() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let cgm = CgmConfig { n_train: a.n_train, n_test: a.n_test, sigma: a.sigma, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (train, test): (Dataset<f64>, Dataset<f64>) = synth_cgm(&cgm, &mut rng)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    train.write_csv(&a.out.join("train.csv"))?;
    test.write_csv(&a.out.join("test.csv"))?;
    let manifest = serde_json::json!({
        "generator": cgm,
        "seed": a.seed,
        "train": train.manifest("synth-cgm:train", Some(a.seed)),
        "test": test.manifest("synth-cgm:test", Some(a.seed)),
    });
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!("wrote {} training and {} test rows to {}", train.len(), test.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(a: GradcheckArgs) -> ExitCode {
    let reports = gradcheck::run(a.trials, a.seed, a.max_internal);
    println!("{:<8} {:<15} {:<6} {:>7} {:>12}  result", "method", "task", "family", "coords", "max rel err");
    let mut ok = true;
    for r in &reports {
        let pass = r.max_rel_error < a.tolerance;
        ok &= pass;
        println!(
            "{:<8} {:<15} {:<6} {:>7} {:>12.3e}  {}",
            r.variant.name(),
            format!("{:?}", r.task).to_lowercase(),
            r.family,
            r.coords,
            r.max_rel_error,
            if pass { "pass" } else { "FAIL" }
        );
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
