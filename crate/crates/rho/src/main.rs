use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rho::config::{self, PipelineConfig};
use rho::stages::{self, Workspace};

#[derive(Parser)]
#[command(name = "rho", version, about = "Knowledge-grounded dialogue generation with KG-walk re-ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic movie graph and dialogue splits.
    Synth(Common),
    /// Train TransE embeddings for the graph.
    TrainKg(Common),
    /// Link-prediction metrics of the trained embeddings.
    EvalKg(Common),
    /// Train the grounded encoder-decoder.
    TrainGen(Common),
    /// Train the path walker.
    TrainRr(Common),
    /// Beam-search candidates for the test split.
    Generate(Common),
    /// Select a candidate per test sample with the walker.
    Rerank(Common),
    /// Score selected and top-beam responses.
    Evaluate(Common),
    /// Run every stage in order.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; stage seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "rho-out")]
    out: PathBuf,
    /// Dotted-name overrides such as `--transe.epochs 50`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl Common {
    fn workspace(&self) -> Result<Workspace> {
        let mut overrides = config::parse_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        let cfg = PipelineConfig::load(self.config.as_deref(), &overrides)?;
        Ok(Workspace::new(&cfg, &self.out))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => stages::run_synth(&c.workspace()?).context("stage synth"),
        Command::TrainKg(c) => stages::run_train_kg(&c.workspace()?).context("stage train-kg"),
        Command::EvalKg(c) => {
            let r = stages::run_eval_kg(&c.workspace()?).context("stage eval-kg")?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
        Command::TrainGen(c) => stages::run_train_gen(&c.workspace()?).context("stage train-gen"),
        Command::TrainRr(c) => stages::run_train_rr(&c.workspace()?).context("stage train-rr"),
        Command::Generate(c) => stages::run_generate(&c.workspace()?).context("stage generate"),
        Command::Rerank(c) => stages::run_rerank(&c.workspace()?).context("stage rerank"),
        Command::Evaluate(c) => {
            let r = stages::run_evaluate(&c.workspace()?).context("stage evaluate")?;
            print!("{}", stages::comparison_table(&r));
            Ok(())
        }
        Command::Pipeline(c) => {
            let ws = c.workspace()?;
            let r = stages::run_pipeline(&ws.cfg, &ws.out)?;
            print!("{}", stages::comparison_table(&r));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
