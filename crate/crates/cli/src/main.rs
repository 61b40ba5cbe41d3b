//! `anchorprop` command-line driver.
//!
//! Exit codes: 0 on success, 1 on a usage error (help goes to stderr), 2 when
//! inputs or configuration fail validation or a run fails on its data.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use config::CommonArgs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl From<anchorprop::Error> for CliError {
    fn from(e: anchorprop::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "anchorprop",
    version,
    about = "Anchor-frame attention propagation for consistent video editing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic clip with exact ground-truth motion.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
        /// Also render grayscale images of this side length.
        #[arg(long, value_name = "SIDE")]
        render: Option<usize>,
    },
    /// Evaluate attention-based point tracking on a clip and write a CSV table.
    Track(ClipInput),
    /// Edit a clip independently or with anchor propagation.
    Edit(ClipInput),
    /// Write an equivariantly augmented source/edited pair dataset.
    Augment {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        images: ImageInput,
    },
    /// Measure how far an image editor is from commuting with sampled transforms.
    VerifyEquivariance {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        images: ImageInput,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Compute Tem-Con and optionally Frame-Acc for a frame sequence.
    Metrics {
        #[command(flatten)]
        common: CommonArgs,
        /// An edit or clip directory, or a `[N, h, w, dim]` container.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Precomputed `[N, D]` frame embeddings; the toy embedder is used otherwise.
        #[arg(long, value_name = "FILE")]
        embeddings: Option<PathBuf>,
        /// `[2, D]` source and target reference embeddings for Frame-Acc.
        #[arg(long, value_name = "FILE")]
        refs: Option<PathBuf>,
        /// Seed of the toy embedder; defaults to the run seed.
        #[arg(long)]
        embed_seed: Option<u64>,
        #[arg(long, default_value_t = 128)]
        embed_dim: usize,
    },
    /// Time anchored editing of a generated clip for several worker counts.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
        worker_counts: Vec<usize>,
    },
}

#[derive(Args, Debug)]
struct ClipInput {
    #[command(flatten)]
    common: CommonArgs,
    /// Clip directory written by `gen`. Its grid and dim replace the network's.
    #[arg(long, value_name = "DIR")]
    clip: PathBuf,
}

#[derive(Args, Debug)]
pub struct ImageInput {
    /// `[N, H, W, C]` or `[H, W, C]` image container with values in [0, 1].
    #[arg(long, value_name = "FILE")]
    src: PathBuf,
    /// Edited counterparts; produced by `--editor` when absent.
    #[arg(long, value_name = "FILE")]
    edited: Option<PathBuf>,
    /// identity, invert, contrast or flip.
    #[arg(long, default_value = "invert")]
    editor: String,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common, render } => commands::gen(&common, render),
        Command::Track(c) => commands::track(&c.common, &c.clip),
        Command::Edit(c) => commands::edit(&c.common, &c.clip),
        Command::Augment { common, images } => {
            commands::augment(&common, &images.src, images.edited.as_deref(), &images.editor)
        }
        Command::VerifyEquivariance {
            common,
            images,
            trials,
            tol,
        } => commands::verify(&common, &images.src, &images.editor, trials, tol),
        Command::Metrics {
            common,
            input,
            embeddings,
            refs,
            embed_seed,
            embed_dim,
        } => commands::metrics(
            &common,
            &input,
            embeddings.as_deref(),
            refs.as_deref(),
            embed_seed,
            embed_dim,
        ),
        Command::Bench { common, worker_counts } => commands::bench(&common, &worker_counts),
    }
}

fn usage(msg: &str) -> ExitCode {
    eprintln!("{msg}");
    eprintln!("{}", Cli::command().render_help());
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => usage(&e.render().to_string()),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => usage(&format!("error: {msg}")),
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
