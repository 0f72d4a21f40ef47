use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metarm_cli::commands::{self, Axis};
use metarm_cli::io::Layout;
use metarm_cli::{CliError, ExperimentConfig, Method};

const RESULTS_HELP: &str = "\
Artifacts (under --out):
  seed-<s>/data/{distribution,train-NNN,heldout-NNN}.jsonl   gen
  seed-<s>/train/{ours,mtrm}.jsonl                           train
  seed-<s>/policies/<method>.jsonl                           adapt
  seed-<s>/results.csv                                       eval
  results.csv, summary.csv                                   report
  sweep-<axis>.csv                                           sweep
  checkgrad-<s>.csv                                          checkgrad

results.csv columns: seed,method,split,task,pl_accuracy,true_reward,n_pairs
summary.csv columns: method,split,seeds,mean_pl_accuracy,min_pl_accuracy,max_pl_accuracy,mean_true_reward
sweep-<axis>.csv columns: axis,value,seed,method,metric,score

Exit status: 0 success, 1 usage or configuration error, 2 hypergradient check failure.";

#[derive(Parser)]
#[command(name = "metarm", version, about = "Meta-learned reward models: seeded experiment pipeline", after_help = RESULTS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated methods (sft, mtrm, hpl, ours), overriding the config.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, Layout), CliError> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if !self.seed.is_empty() {
            config.seeds = self.seed.clone();
        }
        if !self.method.is_empty() {
            config.methods = self.method.clone();
        }
        config.validate()?;
        Ok((config, Layout::new(&self.out)))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate task suites and their datasets.
    Gen(Common),
    /// Meta-train the reward model (ours) and fit the pooled reward model (mtrm).
    Train(Common),
    /// Produce one policy per task and method.
    Adapt(Common),
    /// Score policies on every task's preferences.
    Eval(Common),
    /// Merge per-seed results and summarize.
    Report(Common),
    /// gen, train, adapt, eval and report in sequence.
    Run(Common),
    /// Run the pipeline over values of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Compare analytic and finite-difference hypergradients.
    Checkgrad {
        #[command(flatten)]
        common: Common,
        /// Relative-error tolerance, overriding the config.
        #[arg(long)]
        tol: Option<f64>,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen(c) => {
            let (config, layout) = c.load()?;
            commands::gen(&config, &layout)
        }
        Command::Train(c) => {
            let (config, layout) = c.load()?;
            commands::train(&config, &layout)
        }
        Command::Adapt(c) => {
            let (config, layout) = c.load()?;
            commands::adapt(&config, &layout)
        }
        Command::Eval(c) => {
            let (config, layout) = c.load()?;
            commands::eval(&config, &layout)
        }
        Command::Report(c) => {
            let (config, layout) = c.load()?;
            print!("{}", commands::report(&config, &layout)?);
            Ok(())
        }
        Command::Run(c) => {
            let (config, layout) = c.load()?;
            commands::gen(&config, &layout)?;
            commands::train(&config, &layout)?;
            commands::adapt(&config, &layout)?;
            commands::eval(&config, &layout)?;
            print!("{}", commands::report(&config, &layout)?);
            Ok(())
        }
        Command::Sweep { common, axis, values } => {
            let (config, layout) = common.load()?;
            commands::sweep(&config, &layout, axis, &values)
        }
        Command::Checkgrad { common, tol } => {
            let (config, layout) = common.load()?;
            let (text, failure) = commands::checkgrad(&config, Some(&layout), tol)?;
            print!("{text}");
            failure.map_or(Ok(()), Err)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metarm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
