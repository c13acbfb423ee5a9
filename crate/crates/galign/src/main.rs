use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use galign::cli::{self, Command, CommandSpec, StyleChoice};

/// Two-domain image translation: synthetic data, training, translation,
/// evaluation and attention inspection.
#[derive(Parser)]
#[command(name = "galign", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Dotted-key overrides, e.g. `--set trainer.lambda_local=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory (re-rooted by GALIGN_OUT_ROOT when relative).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate the synthetic two-domain corpus as PNG folders.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on configured folders or the synthetic corpus.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Translate a folder of images with a trained checkpoint.
    Translate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file (e.g. out/checkpoints/latest.ckpt).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Folder of input images.
        #[arg(long)]
        input: PathBuf,
        /// Condition on this target image instead of the stored
        /// running-mean style code.
        #[arg(long)]
        style_image: Option<PathBuf>,
    },
    /// Compute translation metrics between two image folders.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Folder of translated images.
        #[arg(long)]
        translated: PathBuf,
        /// Folder of target-domain images.
        #[arg(long)]
        target: PathBuf,
    },
    /// Render attention-map panels for a folder of images.
    InspectAttention {
        #[command(flatten)]
        common: Common,
        /// Folder of input images.
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, command) = match cli.command {
        Sub::SynthData { common } => (common, Command::SynthData),
        Sub::Train { common } => (common, Command::Train),
        Sub::Translate {
            common,
            checkpoint,
            input,
            style_image,
        } => (
            common,
            Command::Translate {
                checkpoint,
                input,
                style: match style_image {
                    Some(path) => StyleChoice::FromImage(path),
                    None => StyleChoice::RunningMean,
                },
            },
        ),
        Sub::Eval {
            common,
            translated,
            target,
        } => (common, Command::Eval { translated, target }),
        Sub::InspectAttention { common, input } => {
            (common, Command::InspectAttention { input })
        }
    };
    let result = cli::run(CommandSpec {
        command,
        config: common.config,
        overrides: common.overrides,
        out_dir: common.out,
    });
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(cli::exit_code(&result) as u8)
}
