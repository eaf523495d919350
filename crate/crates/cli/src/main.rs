mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Overrides;

#[derive(Parser)]
#[command(
    name = "posereg",
    version,
    about = "Camera pose regression with self-attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $POSEREG_OUT/<command>, else runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    /// Train with the multi-frame loss.
    #[arg(long)]
    temporal: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            deterministic: self.deterministic,
            temporal: self.temporal,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    Saliency,
    Distances,
    Trajectory,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, log and resolved config.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Saliency maps, feature-distance profiles or trajectory overlays.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Frame for saliency.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Anchor frame for distances.
        #[arg(long, default_value_t = 0)]
        anchor: usize,
        /// Take features before the attention block.
        #[arg(long)]
        pre_attention: bool,
    },
    /// Train and evaluate the basic, attention and temporal variants.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Render a synthetic dataset with train and test manifests.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        /// Side length of the rendered square images.
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common } => commands::train(common.config.as_deref(), &common.overrides()),
        Command::Eval { common, checkpoint } => {
            commands::eval(common.config.as_deref(), &common.overrides(), checkpoint)
        }
        Command::Analyze {
            common,
            checkpoint,
            mode,
            frame,
            anchor,
            pre_attention,
        } => commands::analyze(
            common.config.as_deref(),
            &common.overrides(),
            checkpoint,
            commands::AnalyzeArgs {
                mode: *mode,
                frame: *frame,
                anchor: *anchor,
                pre_attention: *pre_attention,
            },
        ),
        Command::Ablate { common } => {
            commands::ablate(common.config.as_deref(), &common.overrides())
        }
        Command::SynthData {
            common,
            frames,
            size,
        } => commands::synth_data(
            &common.overrides(),
            common.seed.unwrap_or(0),
            *frames,
            *size,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.kind.code())
        }
    }
}
