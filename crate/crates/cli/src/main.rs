use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mergeforge_cli::jobs::{
    run_dam_train, run_eval, run_evolve, run_report, DamTrainJob, EvalJob, EvolveJob, ReportJob,
};
use mergeforge_cli::pipeline::{default_pipeline_config, fabricate, run_pipeline, PipelineConfig};
use mergeforge_core::merge::{run_recipe, MergeRecipe};
use mergeforge_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mergeforge",
    about = "Merge fine-tuned transformer checkpoints: data-free methods, learned per-column coefficients, and an evolutionary baseline.",
    version
)]
struct Cli {
    /// Workspace root all config paths resolve against.
    #[arg(long, global = true, env = "MERGEFORGE_WORKSPACE", default_value = ".")]
    workspace: PathBuf,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic task datasets and fabricate base + expert models.
    GenExperts {
        /// Pipeline config JSON; defaults to the built-in suite.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one data-free merge recipe.
    Merge {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train merge coefficients and bake the merged checkpoint.
    DamTrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Search per-layer merge weights with the evolution strategy.
    Evolve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint's per-task cross-entropy.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-emit report files from an existing report.json.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the whole suite: fabricate, merge with every method, evaluate,
    /// and write the comparison report.
    Pipeline {
        /// Pipeline config JSON; defaults to the built-in suite.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Recompute every stage even if cached.
        #[arg(long)]
        force: bool,
    },
}

fn load_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))
}

fn pipeline_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut config = match path {
        Some(p) => load_json(p)?,
        None => default_pipeline_config(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.workspace.as_path();
    match cli.command {
        Command::GenExperts { config } => {
            let config = pipeline_config(&config, cli.seed)?;
            let ran = fabricate(root, &config, false)?;
            eprintln!(
                "experts ready under {} ({})",
                root.join(&config.output_dir).display(),
                if ran { "built" } else { "cached" }
            );
        }
        Command::Merge { config } => {
            let mut recipe: MergeRecipe = load_json(&config)?;
            if let Some(seed) = cli.seed {
                recipe.seed = seed;
            }
            run_recipe(&recipe, root)?;
            eprintln!("merged checkpoint written to {}", root.join(&recipe.output).display());
        }
        Command::DamTrain { config } => {
            let mut job: DamTrainJob = load_json(&config)?;
            if let Some(seed) = cli.seed {
                job.dam.seed = seed;
            }
            let report = run_dam_train(&job, root)?;
            eprintln!(
                "trained {} coefficients over {} steps (final loss {:?})",
                report.summary.coefficient_count, report.summary.steps, report.summary.final_total
            );
        }
        Command::Evolve { config } => {
            let mut job: EvolveJob = load_json(&config)?;
            if let Some(seed) = cli.seed {
                job.evo.seed = seed;
            }
            let (_, history) = run_evolve(&job, root)?;
            if let Some(last) = history.generations.last() {
                eprintln!(
                    "evolved {} generations, best fitness {:.6}",
                    last.generation, last.best_fitness
                );
            }
        }
        Command::Eval { config } => {
            let job: EvalJob = load_json(&config)?;
            for (task, loss) in run_eval(&job, root)? {
                println!("{task}\t{loss:.6}");
            }
        }
        Command::Report { config } => {
            let job: ReportJob = load_json(&config)?;
            let report = run_report(&job, root)?;
            print!("{}", report.render_table());
        }
        Command::Pipeline { config, force } => {
            let config = pipeline_config(&config, cli.seed)?;
            let report = run_pipeline(root, &config, force)?;
            print!("{}", report.render_table());
            eprintln!("pipeline finished in {:.1}s", report.runtime_secs);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for configuration problems, 3 for numeric failures, 1 otherwise.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } | Error::Diverged { .. } => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}
