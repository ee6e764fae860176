use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;

#[derive(Debug, Parser)]
#[command(name = "soundloc", version, about = "Class-aware sounding object localization")]
struct Cli {
    /// Global seed; overrides every seed in the configuration.
    #[arg(long, global = true, env = "SOUNDLOC_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the procedural shapes-and-tones dataset.
    GenToy(GenToyArgs),
    /// Train the localizer and the object dictionary on single-source clips.
    TrainStage1(TrainStage1Args),
    /// Fine-tune on multi-source clips with the dictionary frozen.
    TrainStage2(TrainStage2Args),
    /// Score a checkpoint on a manifest and write a JSON report.
    Eval(EvalArgs),
    /// Per-category heatmaps for one image and audio pair.
    Localize(LocalizeArgs),
    /// Mix multi-source scenes from a single-source manifest.
    SynthCocktail(SynthArgs),
}

#[derive(Debug, Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generator settings (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_per_category: Option<usize>,
    #[arg(long)]
    test_per_category: Option<usize>,
    #[arg(long)]
    multi_train: Option<usize>,
    #[arg(long)]
    multi_test: Option<usize>,
    #[arg(long)]
    missing_categories: Option<usize>,
    #[arg(long)]
    noise_rate: Option<f64>,
}

/// Options shared by every command that reads a run configuration.
#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (TOML or JSON); unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the settings tuned for the toy dataset.
    #[arg(long)]
    toy: bool,
}

#[derive(Debug, Args)]
struct TrainStage1Args {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    alternations: Option<usize>,
    /// Run all localization epochs before a single clustering pass.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct TrainStage2Args {
    #[arg(long)]
    manifest: PathBuf,
    /// Stage-one checkpoint.
    #[arg(long)]
    stage1: PathBuf,
    /// Object dictionary written by train-stage1.
    #[arg(long)]
    dict: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Drop the localization term.
    #[arg(long)]
    no_loc: bool,
    /// Use unfiltered category maps.
    #[arg(long)]
    no_prod: bool,
    /// Drop the distribution-consistency term.
    #[arg(long)]
    no_consistency: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Skip the localization filter at inference.
    #[arg(long)]
    no_prod: bool,
}

#[derive(Debug, Args)]
struct LocalizeArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Also write the box of every category map.
    #[arg(long)]
    boxes: bool,
    #[arg(long)]
    no_prod: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Single-source manifest to draw clips from.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value = "mix")]
    prefix: String,
    #[arg(long, default_value_t = 16_000)]
    sample_rate: u32,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenToy(a) => commands::gen_toy(a, cli.seed),
        Command::TrainStage1(a) => commands::train_stage1(a, cli.seed),
        Command::TrainStage2(a) => commands::train_stage2(a, cli.seed),
        Command::Eval(a) => commands::eval(a, cli.seed),
        Command::Localize(a) => commands::localize(a, cli.seed),
        Command::SynthCocktail(a) => commands::synth_cocktail(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
