use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use evidistill_cli::{exit_code, Pipeline, PipelineConfig};

#[derive(Parser)]
#[command(name = "evidistill", version, about = "Distill a sampled-only target into a proxy and score response reliability")]
struct Cli {
    /// Run directory; each command writes its own subdirectory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set adversarial.lambda=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the fact world, corpora and QA items.
    GenWorld,
    /// Train the target model on the target corpus.
    TrainTarget,
    /// Train the proxy base on its smaller corpus.
    TrainBase,
    /// Sample the distillation set and evaluation responses from the target.
    Collect,
    /// Collect, then train the proxy adapters adversarially.
    Distill,
    /// Score responses with the distilled proxy and the base.
    Score {
        /// JSONL with `id`, `prompt` and `response` fields.
        #[arg(long)]
        responses: Option<PathBuf>,
    },
    /// AUROC, AUPR and ECE of both proxies on the scored responses.
    Eval,
    /// Missing-mass decay simulation.
    Theory,
    /// CSV bundles for plotting.
    Plotdata,
    /// Every stage in order.
    All,
    /// Print the resolved configuration as TOML.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let config = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Command::Config = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let p = Pipeline::new(config, cli.out);
    match cli.command {
        Command::GenWorld => p.gen_world().map(drop),
        Command::TrainTarget => p.train_target().map(drop),
        Command::TrainBase => p.train_base().map(drop),
        Command::Collect => p.collect().map(drop),
        Command::Distill => p.distill().map(drop),
        Command::Score { responses } => p.score(responses.as_deref()).map(drop),
        Command::Eval => p.eval().map(drop),
        Command::Theory => p.theory().map(drop),
        Command::Plotdata => p.plotdata().map(drop),
        Command::All => p.all(),
        Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
