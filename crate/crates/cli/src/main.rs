//! `tplora`: dataset preparation, training, merging, benchmarking and
//! generation from the command line.
//!
//! Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric
//! failure. Failures print one line, `error[<category>]: <message>`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tplora", version, about = "Tensor-parallel LoRA fine-tuning for a miniature decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split an Alpaca-format JSON file into train/test files, mixing base-pool examples into train.
    Dataset(DatasetArgs),
    /// Train LoRA adapters on a dataset file.
    Train(TrainArgs),
    /// Fold adapters into a base model: merge <BASE_PATH> <ADAPTER_PATH> <SAVE_PATH>.
    Merge(MergeArgs),
    /// Measure per-device memory and step time across mesh sizes.
    Bench(BenchArgs),
    /// Generate text from a base or merged model, optionally with adapters.
    Generate(GenerateArgs),
    /// Write a randomly initialized base model container.
    InitBase(InitBaseArgs),
}

#[derive(Args)]
pub struct DatasetArgs {
    /// Alpaca-format JSON array.
    pub path: PathBuf,
    /// Which split to write: train, test or all.
    #[arg(long, default_value = "all")]
    pub split: String,
    #[arg(long, default_value_t = 0.8)]
    pub split_percentage: f64,
    /// Recorded in the manifest for the training step.
    #[arg(long, default_value_t = 512)]
    pub max_len: usize,
    /// Fraction of the train split to add from the base pool.
    #[arg(long, default_value_t = 0.3)]
    pub alpaca_mix: f64,
    #[arg(long)]
    pub base_pool: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for train.json, test.json and manifest.json.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TrainConfig JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Alpaca-format JSON used as-is for training.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Adapter checkpoint to write.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Overrides n_devices from the config.
    #[arg(long)]
    pub devices: Option<usize>,
    /// Overrides n_steps from the config.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides max_len from the config.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Compute the loss only on response tokens.
    #[arg(long)]
    pub mask_prompt: bool,
    /// Also write the training report JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct MergeArgs {
    pub base_path: PathBuf,
    pub adapter_path: PathBuf,
    pub save_path: PathBuf,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Comma-separated mesh sizes.
    #[arg(long, default_value = "1,2,4", value_delimiter = ',')]
    pub devices: Vec<usize>,
    /// TrainConfig JSON naming the base model.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Alpaca-format JSON; a built-in two-example set is used if absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Base or merged model container.
    #[arg(long)]
    pub model: PathBuf,
    /// Adapter checkpoint applied on top of the model.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Instruction text, rendered with the training prompt template.
    #[arg(long)]
    pub prompt: String,
    /// Optional input block for the template.
    #[arg(long)]
    pub input: Option<String>,
    /// Feed the prompt as-is instead of rendering the template.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    /// Sample instead of greedy argmax decoding.
    #[arg(long)]
    pub sample: bool,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct InitBaseArgs {
    /// Output container path.
    #[arg(long)]
    pub out: PathBuf,
    /// ModelConfig JSON; overrides the shape flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 512)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(a) => commands::dataset(&a),
        Command::Train(a) => commands::train(&a),
        Command::Merge(a) => commands::merge(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::InitBase(a) => commands::init_base(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error[{}]: {e}", category.as_str());
            ExitCode::from(commands::exit_code(category))
        }
    }
}
