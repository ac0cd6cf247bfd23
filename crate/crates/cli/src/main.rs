use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

#[derive(Parser)]
#[command(
    name = "enct5",
    version,
    about = "Pretrain, convert, fine-tune and evaluate T5, 1decT5 and EncT5 models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Span-corruption pretraining of a T5 model.
    Pretrain(PretrainArgs),
    /// Convert a T5 checkpoint to 1decT5 or EncT5.
    Surgery(SurgeryArgs),
    /// Fine-tune one variant on a task.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on a task split.
    Eval(EvalArgs),
    /// Parameter counts by group, with the EncT5/T5 ratio.
    Params(ParamsArgs),
    /// Packing statistics for a task.
    PackInspect(PackInspectArgs),
    /// Per-step training time of EncT5 and T5 at a matched config.
    StepTime(StepTimeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    T5,
    #[value(name = "1dect5")]
    OneDecT5,
    Enct5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Classification,
    Regression,
}

#[derive(Args)]
struct PretrainArgs {
    /// Model config file, or `preset:desk`.
    #[arg(long)]
    model_config: String,
    /// Train config file, or `preset:desk` / `preset:paper`.
    #[arg(long)]
    train_config: String,
    /// Text file with one sentence per line, or `synthetic:topic[:N]`.
    #[arg(long)]
    corpus: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SurgeryArgs {
    #[arg(long)]
    from: PathBuf,
    #[arg(long, value_enum)]
    variant: VariantArg,
    /// Number of real classes (EncT5 classification).
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, value_enum, default_value = "classification")]
    task_kind: KindArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long, value_enum)]
    variant: VariantArg,
    /// Checkpoint path, or `random`.
    #[arg(long)]
    init: String,
    /// Task spec file, or `synthetic:<generator>:<seed>:<size>`.
    #[arg(long)]
    task: String,
    #[arg(long)]
    train_config: String,
    /// Base model config for `--init random`.
    #[arg(long)]
    model_config: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    variant: VariantArg,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long, default_value = "validation")]
    split: String,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Also write the metric bundle and a manifest into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    model_config: String,
    #[arg(long, value_enum, default_value = "enct5")]
    variant: VariantArg,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, value_enum, default_value = "classification")]
    task_kind: KindArg,
}

#[derive(Args)]
struct PackInspectArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    max_len: usize,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct StepTimeArgs {
    #[arg(long, default_value = "preset:desk")]
    model_config: String,
    #[arg(long, default_value = "preset:desk")]
    train_config: String,
    /// Timed steps per variant, after one warm-up step.
    #[arg(long, default_value_t = 5)]
    steps: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Surgery(a) => commands::surgery(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Params(a) => commands::params(a),
        Command::PackInspect(a) => commands::pack_inspect(a),
        Command::StepTime(a) => commands::step_time(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
