use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use semsr::sampler::Preset;
use semsr_cli::{
    cmd_build_dataset, cmd_infer, cmd_score, cmd_sweep, cmd_train, error_line, load_config, ScoreArgs, SweepArgs,
};

#[derive(Parser)]
#[command(name = "semsr", version, about = "Semantic-guided latent diffusion super-resolution")]
struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run and sampler seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble the patch dataset and its manifest.
    BuildDataset {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoencoder, backbone and conditioning branches.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue fine-tuning from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve every image in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        preset: Option<Preset>,
    },
    /// Run a sampler hyperparameter grid and score every point.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Omit to replay injected metrics without sampling.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        inject_metrics: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Fill no-reference columns with hash-derived placeholder scores.
        #[arg(long)]
        nr_stub: bool,
    },
    /// Score SR images against references and/or injected metrics.
    Score {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sr: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        inject_metrics: Option<PathBuf>,
        /// Extractor weights for the perceptual distance.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        nr_stub: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::BuildDataset { out } => {
            let m = cmd_build_dataset(&cfg, &out)?;
            println!("{} patches written to {}", m.records.len(), out.display());
        }
        Command::Train { manifest, out, resume } => {
            let ckpt = cmd_train(&cfg, &manifest, &out, resume.as_deref())?;
            println!("checkpoint {}", ckpt.display());
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            preset,
        } => {
            let n = cmd_infer(&checkpoint, &input, &out, &cfg, preset)?;
            println!("{n} images written to {}", out.display());
        }
        Command::Sweep {
            grid,
            out,
            checkpoint,
            input,
            reference,
            preset,
            inject_metrics,
            workers,
            nr_stub,
        } => {
            let args = SweepArgs {
                checkpoint,
                input,
                reference,
                grid,
                inject: inject_metrics,
                out,
                preset,
                workers,
                nr_stub,
            };
            for r in cmd_sweep(&cfg, &args)? {
                println!(
                    "{}\twild {}\tsynthetic {}",
                    r.point.key(),
                    semsr::metrics::fmt_cell(r.aggregate.wild_score),
                    semsr::metrics::fmt_cell(r.aggregate.synthetic_score)
                );
            }
        }
        Command::Score {
            out,
            sr,
            reference,
            inject_metrics,
            checkpoint,
            nr_stub,
        } => {
            let args = ScoreArgs {
                sr,
                reference,
                inject: inject_metrics,
                checkpoint,
                out,
                nr_stub,
            };
            let (reports, agg) = cmd_score(&cfg, &args)?;
            println!(
                "{} images\twild {}\tsynthetic {}",
                reports.len(),
                semsr::metrics::fmt_cell(agg.wild_score),
                semsr::metrics::fmt_cell(agg.synthetic_score)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string().trim(), "kind": "usage" }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
