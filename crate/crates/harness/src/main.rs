use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lfm_core::trilevel::Order;
use lfm_harness::ablation::{cmd_ablate, Study};
use lfm_harness::commands::{cmd_evaluate, cmd_search, Overrides};
use lfm_harness::config::ExperimentConfig;
use lfm_harness::convert::cmd_convert;
use lfm_harness::verify::{cmd_verify, parse_term};
use lfm_harness::HarnessError;

#[derive(Parser)]
#[command(
    name = "lfmcw",
    version,
    about = "Tri-level architecture search with class-weighted synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a cell and write genotype, metrics and checkpoint files.
    Search(Common),
    /// Train a searched cell from scratch and report held-out accuracy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Genotype file written by `search`.
        #[arg(long)]
        genotype: PathBuf,
        /// Accept a genotype searched over a different op set.
        #[arg(long)]
        force: bool,
    },
    /// Run an ablation grid and summarize it as CSV and SVG.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        study: StudyArg,
    },
    /// Run the gradient and hypergradient oracle suite.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Pack per-class image directories into an LFMC file.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Synthetic loss weight.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    First,
    Second,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyArg {
    LambdaSweep,
    SyntheticOnly,
    GeneratorCapacity,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        Overrides {
            seed: self.seed,
            output: self.out.clone(),
            order: self.mode.map(|m| match m {
                ModeArg::First => Order::First,
                ModeArg::Second => Order::Second,
            }),
            lambda: self.lambda,
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Search(common) => {
            let cfg = common.load()?;
            let r = cmd_search(&cfg).context("search failed")?;
            println!("config hash   {}", r.config_hash);
            println!("genotype      {}", r.genotype_path.unwrap().display());
            println!("metrics       {}", r.metrics_path.unwrap().display());
            println!("checkpoint    {}", r.checkpoint_path.unwrap().display());
            println!(
                "supernet acc  {:.4}",
                r.supernet_val_accuracy.unwrap_or(f64::NAN)
            );
            println!("wall clock    {:.1} s", r.wall_clock_secs);
        }
        Command::Evaluate {
            common,
            genotype,
            force,
        } => {
            let cfg = common.load()?;
            let r = cmd_evaluate(&cfg, &genotype, force).context("evaluation failed")?;
            let e = r.evaluation.unwrap();
            println!("test accuracy {:.4}", e.accuracy);
            println!("test error    {:.4}", e.error());
            println!("parameters    {}", e.param_count);
            println!("wall clock    {:.1} s", r.wall_clock_secs);
        }
        Command::Ablate { common, study } => {
            let mut cfg = common.load()?;
            if let Some(l) = common.lambda {
                cfg.ablation.lambdas = vec![l];
            }
            let study = match study {
                StudyArg::LambdaSweep => Study::LambdaSweep,
                StudyArg::SyntheticOnly => Study::SyntheticOnly,
                StudyArg::GeneratorCapacity => Study::GeneratorCapacity,
            };
            let s = cmd_ablate(&cfg, study).context("ablation failed")?;
            println!(
                "{:24} {:>5} {:>6} {:>10} {:>10}",
                "point", "runs", "failed", "mean_err", "std_err"
            );
            for r in &s.rows {
                println!(
                    "{:24} {:>5} {:>6} {:>10.4} {:>10.4}",
                    r.point, r.runs, r.failed, r.mean_error, r.std_error
                );
            }
            println!("summary {}", s.summary_path.display());
            println!("plot    {}", s.plot_path.display());
        }
        Command::Verify { inject_fault } => {
            let fault = match inject_fault {
                Some(name) => Some(parse_term(&name).ok_or_else(|| {
                    HarnessError::Usage(format!("unknown hypergradient term `{name}`"))
                })?),
                None => None,
            };
            let report = cmd_verify(fault)?;
            print!("{}", report.table());
            return Ok(report.passed());
        }
        Command::Convert { input, output } => {
            let r = cmd_convert(&input, &output)?;
            for (name, n) in r.classes.iter().zip(&r.counts) {
                println!("{name}: {n} images");
            }
            println!("wrote {} ({}x{})", output.display(), r.height, r.width);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<HarnessError>()
                .map_or(1, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
