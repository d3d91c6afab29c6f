mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use amulet_core::infer::InferMode;
use amulet_core::model::Variant;

#[derive(Parser, Debug)]
#[command(
    name = "amulet",
    version,
    about = "Salient object detection by multi-level feature aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shape-saliency dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset directory with a manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// amulet-1/1, 1/2, 1/4, 1/8 or 1/16.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        no_bpr: bool,
        #[arg(long)]
        max_iters: Option<u64>,
    },
    /// Write one 8-bit saliency map per input image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the resolved config saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<InferMode>,
    },
    /// Score saliency maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of the network gradients.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the backward pass of one primitive, e.g. conv2d.
        #[arg(long)]
        corrupt: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Synth {
            config,
            out,
            count,
            seed,
        } => commands::synth(config.as_deref(), &out, count, seed),
        Command::Train {
            config,
            data,
            out,
            resume,
            variant,
            no_bpr,
            max_iters,
        } => commands::train(commands::TrainArgs {
            config,
            data,
            out,
            resume,
            variant,
            no_bpr,
            max_iters,
        }),
        Command::Infer {
            checkpoint,
            images,
            out,
            config,
            mode,
        } => commands::infer(&checkpoint, &images, &out, config.as_deref(), mode),
        Command::Eval {
            pred,
            gt,
            out,
            config,
        } => commands::eval(&pred, &gt, &out, config.as_deref()),
        Command::Gradcheck {
            config,
            seed,
            corrupt,
        } => commands::gradcheck(config.as_deref(), seed, corrupt.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let code = commands::exit_code(&e);
            let kind = if code == 1 { "config" } else { "runtime" };
            eprintln!("error[{kind}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
