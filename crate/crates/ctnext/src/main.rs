use clap::{Parser, Subcommand};
use ctnext::cli::{
    cmd_augment, cmd_evaluate, cmd_preprocess, cmd_split, cmd_synth, cmd_train, CliError,
    RunConfig,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ctnext",
    about = "CT slice classification pipeline: phantom synthesis, preprocessing, augmentation, two-phase training, evaluation"
)]
struct Cli {
    /// Run configuration (TOML). Relative paths resolve against its directory.
    #[arg(long, global = true, default_value = "run.toml")]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom corpus (.nii volumes + labels.csv).
    Synth,
    /// Run the slice pipeline over the raw corpus into a .slc dataset.
    Preprocess,
    /// Stratified train/validation split of the preprocessed dataset.
    Split,
    /// Balance the train split by seeded augmentation.
    Augment,
    /// Two-phase training; writes history.csv and checkpoints.
    Train,
    /// Evaluate a checkpoint and write the report files.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory to evaluate (defaults to the validation split).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Output directory for the report files (defaults to <run_dir>/eval).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(&cli.config, cli.seed)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Preprocess => cmd_preprocess(&cfg),
        Command::Split => cmd_split(&cfg),
        Command::Augment => cmd_augment(&cfg),
        Command::Train => cmd_train(&cfg).map(|_| ()),
        Command::Evaluate {
            checkpoint,
            data_dir,
            out_dir,
        } => cmd_evaluate(&cfg, &checkpoint, data_dir.as_deref(), out_dir.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
