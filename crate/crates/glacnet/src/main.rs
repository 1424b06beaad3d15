use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use glacnet::commands::{self, GenerateArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "glacnet", version, about = "Visual story generation from image feature sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Held-out corpus for early stopping.
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Print the perplexity of a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Generate one story per record of a features file.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        dims: String,
    },
    /// Write the six ablation configurations.
    Ablations {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            corpus,
            config,
            seed,
            out,
            validation,
        } => {
            let args = TrainArgs {
                corpus,
                config,
                seed,
                out,
                validation,
            };
            let file = commands::run_train(&args, &mut io::stderr())?;
            eprintln!("saved {} (epoch {})", args.out.display(), file.checkpoint.epoch);
        }
        Command::Eval { ckpt, corpus } => {
            println!("perplexity={}", commands::run_eval(&ckpt, &corpus)?);
        }
        Command::Generate {
            ckpt,
            features,
            greedy,
            k,
            n_samples,
            seed,
        } => {
            let args = GenerateArgs {
                greedy,
                k,
                n_samples,
                seed,
            };
            for story in commands::run_generate(&ckpt, &features, &args)? {
                for (t, sentence) in story.sentences.iter().enumerate() {
                    println!("{}\t{t}\t{}", story.story_id, sentence.join(" "));
                }
            }
        }
        Command::Gradcheck { dims } => {
            let report = commands::run_gradcheck(&dims)?;
            println!(
                "checked={} failures={} worst_relative_error={:e} ({}[{}]: analytic {:e}, numeric {:e})",
                report.checked,
                report.failures,
                report.worst_relative_error,
                report.worst_param,
                report.worst_index,
                report.worst_analytic,
                report.worst_numeric
            );
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablations { config, out_dir } => {
            for (ablation, path) in commands::run_ablations(&config, &out_dir)? {
                println!("{}\t{}", ablation.label(), path.display());
            }
        }
        Command::Synth { out, n, seed } => commands::run_synth(&out, n, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
