use std::path::PathBuf;
use std::process::ExitCode;

use ace_cli::config::ExperimentConfig;
use ace_cli::experiment::{load_data, ncl_decomposition, run_sweep};
use ace_cli::gradcheck::{run_gradcheck, ABS_FLOOR, REL_TOL};
use ace_cli::report::{render_table, write_report};
use ace_cli::{CliError, Result, SweepReport};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ace",
    version,
    about = "Diversity-controlled ensemble experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one ensemble (the first λ and seed unless given) and report it.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every (λ, seed) cell and report one row per λ.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
    },
    /// NCL on synthetic regression: γ sweep plus bias/variance/covariance terms.
    NclDemo {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare analytic loss gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Report destination.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `csv` or `json`.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Run cells serially on one thread.
    #[arg(long)]
    deterministic: bool,
}

impl RunArgs {
    fn resolve(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(d) = &self.mnist_dir {
            overrides.push(format!("mnist_dir={}", d.display()));
        }
        if let Some(p) = &self.out {
            overrides.push(format!("report={}", p.display()));
        }
        if let Some(f) = &self.format {
            overrides.push(format!("format={f}"));
        }
        if let Some(w) = self.workers {
            overrides.push(format!("workers={w}"));
        }
        if self.deterministic {
            overrides.push("deterministic=true".into());
        }
        ExperimentConfig::load(base, self.config.as_deref(), &overrides)
    }
}

fn sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let data = load_data(cfg)?;
    eprintln!(
        "{} training / {} evaluation samples, {} cells",
        data.train.len(),
        data.eval.len(),
        cfg.lambdas.len() * cfg.seeds.len()
    );
    let report = run_sweep(cfg, &data, &|lambda, r| {
        eprintln!(
            "lambda {lambda} seed {}: ensemble {:.4} single {:.4} ({:.1}s)",
            r.seed, r.ens_ce, r.single_ce, r.wall_s
        )
    })?;
    print!("{}", render_table(&report));
    if let Some(path) = &cfg.report {
        write_report(&report, path, cfg.format)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, lambda, seed } => {
            let mut cfg = run.resolve(ExperimentConfig::default())?;
            cfg.lambdas = vec![lambda.unwrap_or(cfg.lambdas[0])];
            cfg.seeds = vec![seed.unwrap_or(cfg.seeds[0])];
            cfg.validate()?;
            let report = sweep(&cfg)?;
            let r = &report.rows[0].per_seed[0];
            for (k, ce) in r.model_ces.iter().enumerate() {
                match r.model_accs.get(k) {
                    Some(acc) => println!("member {k}: acc {acc:.4} ce {ce:.4}"),
                    None => println!("member {k}: mse {ce:.4}"),
                }
            }
        }
        Command::Sweep { run } => {
            let cfg = run.resolve(ExperimentConfig::default())?;
            sweep(&cfg)?;
        }
        Command::NclDemo { run } => {
            let cfg = run.resolve(ExperimentConfig::ncl_demo())?;
            sweep(&cfg)?;
            if cfg.seeds.len() >= 2 {
                let data = load_data(&cfg)?;
                println!(
                    "\n{:>8}  {:>10}  {:>10}  {:>10}  {:>10}",
                    "gamma", "bias2", "variance", "covariance", "mse"
                );
                for &gamma in &cfg.lambdas {
                    let b = ncl_decomposition(&cfg, &data, gamma)?;
                    println!(
                        "{gamma:>8}  {:>10.5}  {:>10.5}  {:>10.5}  {:>10.5}",
                        b.bias_sq, b.variance, b.covariance, b.ensemble_mse
                    );
                }
            }
        }
        Command::Gradcheck { instances, seed } => {
            let s = run_gradcheck(instances, seed)?;
            println!("instances: {}", s.instances);
            for (name, c) in [
                ("ace", s.ace),
                ("weighted ace", s.weighted),
                ("softmax ce", s.softmax_ce),
            ] {
                println!(
                    "{name:>12}: max abs {:.3e}, max rel {:.3e} -> {}",
                    c.max_abs,
                    c.max_rel,
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            println!("loss forms: max gap {:.3e}", s.forms_max_diff);
            if !s.passed() {
                return Err(CliError::Numeric(format!(
                    "gradients disagree beyond rel {REL_TOL:e} / abs {ABS_FLOOR:e}"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
