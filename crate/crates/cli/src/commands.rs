//! Subcommand bodies. Each returns the core error type so `main` can map
//! its category to an exit code.

use std::fs;
use std::path::Path;

use serde_json::json;
use tplora_bench::{compare_report, run_bench, write_report};
use tplora_core::convert::{check_compatible, merge_command, read_base, write_base};
use tplora_core::data::{
    detokenize, load_alpaca, render_prompt, save_alpaca, tokenize, AlpacaDataset, AlpacaExample, DatasetConfig, Split,
    BOS, VOCAB_SIZE,
};
use tplora_core::model::{generate as generate_tokens, init_params, GenerateOptions, ModelConfig};
use tplora_core::train::{load_checkpoint, train_with_base, TrainConfig};
use tplora_core::{Error, ErrorCategory, Result};

use crate::{BenchArgs, DatasetArgs, GenerateArgs, InitBaseArgs, MergeArgs, TrainArgs};

pub fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Validation => 2,
        ErrorCategory::Io => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn write_json(value: &serde_json::Value, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn dataset(args: &DatasetArgs) -> Result<()> {
    let wanted: &[Split] = match args.split.as_str() {
        "all" => &[Split::Train, Split::Test],
        s => match s.parse::<Split>()? {
            Split::Train => &[Split::Train],
            Split::Test => &[Split::Test],
        },
    };
    let config = DatasetConfig {
        split_percentage: args.split_percentage,
        max_len: args.max_len,
        alpaca_mix: args.alpaca_mix,
        base_pool: args.base_pool.clone(),
        seed: args.seed,
    };
    let examples = load_alpaca(&args.path)?;
    let pool = match &args.base_pool {
        Some(p) => load_alpaca(p)?,
        None => {
            log::warn!("no --base-pool given; nothing is mixed into the train split");
            Vec::new()
        }
    };
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let mut written = serde_json::Map::new();
    let mut last = None;
    for &kind in wanted {
        let ds = AlpacaDataset::from_examples(&examples, &pool, kind, &config)?;
        let name = match kind {
            Split::Train => "train.json",
            Split::Test => "test.json",
        };
        save_alpaca(&ds.examples, &args.out_dir.join(name))?;
        written.insert(name.into(), json!(ds.len()));
        last = Some(ds);
    }
    let ds = last.expect("at least one split");
    let manifest = json!({
        "source": args.path,
        "base_pool": args.base_pool,
        "seed": args.seed,
        "split_percentage": args.split_percentage,
        "alpaca_mix": args.alpaca_mix,
        "max_len": args.max_len,
        "source_examples": examples.len(),
        "train_before_mix": ds.train_len,
        "test": ds.test_len,
        "mix_requested": ds.mix_requested,
        "mix_added": ds.mix_added,
        "train_after_mix": ds.train_len + ds.mix_added,
        "files": written,
    });
    write_json(&manifest, &args.out_dir.join("manifest.json"))?;
    println!(
        "train {} (+{} mixed) test {}",
        ds.train_len, ds.mix_added, ds.test_len
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut config = TrainConfig::load(&args.config)?;
    if let Some(n) = args.devices {
        config.n_devices = n;
    }
    if let Some(n) = args.steps {
        config.n_steps = n;
    }
    if let Some(n) = args.max_len {
        config.max_len = n;
    }
    config.mask_prompt |= args.mask_prompt;
    config.validate()?;
    let examples = load_alpaca(&args.dataset)?;
    let (model, params) = read_base(&config.base_params_path)?;
    model.validate_for_devices(config.n_devices)?;
    let dataset = AlpacaDataset::whole(examples);
    let outcome = train_with_base(&config, &model, &params, &dataset, Some(&args.checkpoint), |rec| {
        println!("step {} loss {}", rec.step, rec.loss)
    })?;
    if let Some(path) = &args.report {
        let value = serde_json::to_value(&outcome.report).expect("report serializes");
        write_json(&value, path)?;
    }
    Ok(())
}

pub fn merge(args: &MergeArgs) -> Result<()> {
    merge_command(&args.base_path, &args.adapter_path, &args.save_path)
}

/// Used when `bench` gets no dataset: two short examples are enough to
/// drive full training steps.
fn synthetic_dataset() -> AlpacaDataset {
    AlpacaDataset::whole(vec![
        AlpacaExample::new("Repeat the word.", Some("tensor"), "tensor"),
        AlpacaExample::new("Name a primary color.", None, "Blue."),
    ])
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    let config = TrainConfig::load(&args.config)?;
    let dataset = match &args.dataset {
        Some(p) => AlpacaDataset::whole(load_alpaca(p)?),
        None => synthetic_dataset(),
    };
    let report = run_bench(&config, &args.devices, &dataset)?;
    write_report(&report, &args.out)?;
    for e in &report.entries {
        match &e.error {
            Some(err) => println!("N={} error: {err}", e.n_devices),
            None => println!(
                "N={} parameter bytes/device {} peak {} step {:.4}s ± {:.4}s",
                e.n_devices,
                e.max_parameter_bytes(),
                e.devices.iter().map(|d| d.peak_bytes).max().unwrap_or(0),
                e.mean_step_seconds,
                e.stddev_step_seconds
            ),
        }
    }
    match compare_report(&report) {
        Ok(cmp) => {
            for c in &cmp.checks {
                println!("{} {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
            }
        }
        Err(e) => log::warn!("no scaling comparison: {e}"),
    }
    Ok(())
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let (model, params) = read_base(&args.model)?;
    let adapters = match &args.adapter {
        Some(p) => {
            let (set, meta) = load_checkpoint(p)?;
            check_compatible(&model, &meta.model_config)?;
            Some(set)
        }
        None => None,
    };
    let mut prompt = vec![BOS];
    if args.raw {
        prompt.extend(tokenize(&args.prompt));
    } else {
        let example = AlpacaExample::new(args.prompt.clone(), args.input.as_deref(), "");
        prompt.extend(tokenize(&render_prompt(&example)));
    }
    let options = GenerateOptions {
        max_new_tokens: args.max_new_tokens,
        greedy: !args.sample,
        temperature: args.temperature,
        seed: args.seed,
        ..GenerateOptions::default()
    };
    let out = generate_tokens(&model, &params, adapters.as_ref(), &prompt, &options)?;
    println!("{}", detokenize(&out));
    Ok(())
}

pub fn init_base(args: &InitBaseArgs) -> Result<()> {
    let model = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<ModelConfig>(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => ModelConfig::new(VOCAB_SIZE, args.d_model, args.n_heads, args.n_layers, args.d_ff, args.max_seq_len),
    };
    model.validate()?;
    let params = init_params(&model, args.seed)?;
    write_base(&params, &model, &args.out)?;
    println!("wrote {} ({} parameters)", args.out.display(), params.parameter_count());
    Ok(())
}
