//! Memory and step-time scaling across mesh sizes.
//!
//! For every requested device count the harness builds a fresh trainer from
//! the same config, seed and dataset (so every mesh size sees identical
//! batches), runs [`WARMUP_STEPS`] untimed steps and then [`TIMED_STEPS`]
//! timed ones. Memory figures come from the per-device ledgers, which count
//! live tensor bytes exactly; they are not allocator or driver measurements.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tplora_core::convert::read_base;
use tplora_core::data::AlpacaDataset;
use tplora_core::model::{ModelConfig, ModelParams, ShardPlan};
use tplora_core::train::{TrainConfig, Trainer};
use tplora_core::{Error, Result};

pub const WARMUP_STEPS: usize = 2;
pub const TIMED_STEPS: usize = 5;

pub const ACCOUNTING_NOTE: &str = "memory figures are exact ledger counts of live f32 tensor bytes per virtual \
device (parameters, adapters and activations); they are not GPU or allocator measurements";

/// Memory of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceBench {
    pub device: usize,
    /// Base-parameter shard bytes.
    pub parameter_bytes: u64,
    pub adapter_bytes: u64,
    /// Ledger peak over the timed steps.
    pub peak_bytes: u64,
}

/// Results for one mesh size. `error` is set (and the other fields empty)
/// when the run could not be set up, e.g. on a divisibility violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub n_devices: usize,
    /// Per-device base-parameter bytes predicted from the shard plan.
    pub expected_parameter_bytes: Option<u64>,
    pub devices: Vec<DeviceBench>,
    pub step_seconds: Vec<f64>,
    pub mean_step_seconds: f64,
    pub stddev_step_seconds: f64,
    pub error: Option<String>,
}

impl BenchEntry {
    fn failed(n_devices: usize, error: &Error) -> Self {
        BenchEntry {
            n_devices,
            expected_parameter_bytes: None,
            devices: Vec::new(),
            step_seconds: Vec::new(),
            mean_step_seconds: 0.0,
            stddev_step_seconds: 0.0,
            error: Some(error.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    /// Largest per-device base-parameter footprint.
    pub fn max_parameter_bytes(&self) -> u64 {
        self.devices.iter().map(|d| d.parameter_bytes).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub accounting_note: String,
    pub model_config: ModelConfig,
    pub warmup_steps: usize,
    pub timed_steps: usize,
    pub entries: Vec<BenchEntry>,
}

/// Mean and sample standard deviation.
pub fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn bench_one(config: &TrainConfig, model: &ModelConfig, params: &ModelParams, dataset: &AlpacaDataset) -> Result<BenchEntry> {
    let n = config.n_devices;
    let expected = ShardPlan::new(model).per_device_bytes(n)?;
    let mut trainer = Trainer::new(config, model, params, dataset)?;
    for _ in 0..WARMUP_STEPS {
        trainer.step()?;
    }
    trainer.mesh().reset_peaks();
    let mut step_seconds = Vec::with_capacity(TIMED_STEPS);
    for _ in 0..TIMED_STEPS {
        step_seconds.push(trainer.step()?.seconds);
    }
    let ledgers = trainer.mesh().ledger_report();
    let devices = trainer
        .device_parameter_bytes()
        .into_iter()
        .zip(trainer.device_adapter_bytes())
        .zip(ledgers)
        .map(|((parameter_bytes, adapter_bytes), l)| DeviceBench {
            device: l.device,
            parameter_bytes,
            adapter_bytes,
            peak_bytes: l.peak_bytes,
        })
        .collect();
    let (mean, stddev) = mean_stddev(&step_seconds);
    Ok(BenchEntry {
        n_devices: n,
        expected_parameter_bytes: Some(expected),
        devices,
        step_seconds,
        mean_step_seconds: mean,
        stddev_step_seconds: stddev,
        error: None,
    })
}

/// Benchmarks an in-memory base model. A failure at one mesh size is
/// recorded in its entry and the remaining sizes still run.
pub fn run_bench_with_base(
    config: &TrainConfig,
    model: &ModelConfig,
    params: &ModelParams,
    mesh_sizes: &[usize],
    dataset: &AlpacaDataset,
) -> Result<BenchReport> {
    if mesh_sizes.is_empty() {
        return Err(Error::InvalidConfig("no mesh sizes requested".into()));
    }
    let entries = mesh_sizes
        .iter()
        .map(|&n| {
            let mut c = config.clone();
            c.n_devices = n;
            bench_one(&c, model, params, dataset).unwrap_or_else(|e| {
                log::warn!("bench at {n} devices failed: {e}");
                BenchEntry::failed(n, &e)
            })
        })
        .collect();
    Ok(BenchReport {
        accounting_note: ACCOUNTING_NOTE.into(),
        model_config: *model,
        warmup_steps: WARMUP_STEPS,
        timed_steps: TIMED_STEPS,
        entries,
    })
}

/// Loads the base model named by `config` and benchmarks it.
pub fn run_bench(config: &TrainConfig, mesh_sizes: &[usize], dataset: &AlpacaDataset) -> Result<BenchReport> {
    let (model, params) = read_base(&config.base_params_path)?;
    run_bench_with_base(config, &model, &params, mesh_sizes, dataset)
}

pub fn write_report(report: &BenchReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// One scaling check against the single-device baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCheck {
    pub n_devices: usize,
    /// Per-device parameter bytes at N over those at N = 1.
    pub ratio: f64,
    /// Measured bytes equal the shard-plan prediction on every device.
    pub matches_plan: bool,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub checks: Vec<ScalingCheck>,
    pub pass: bool,
}

/// Checks the memory-scaling assertions against N = 1: every device matches
/// the shard plan exactly; N = 2 must shrink the per-device footprint and
/// N >= 4 must at least halve it. N = 1 itself is neutral (ratio 1).
pub fn compare_report(report: &BenchReport) -> Result<Comparison> {
    let baseline = report
        .entries
        .iter()
        .find(|e| e.n_devices == 1 && e.is_ok())
        .ok_or_else(|| Error::InvalidConfig("baseline missing".into()))?;
    let base_bytes = baseline.max_parameter_bytes() as f64;
    let mut checks = Vec::new();
    for e in report.entries.iter().filter(|e| e.is_ok()) {
        let ratio = e.max_parameter_bytes() as f64 / base_bytes;
        let matches_plan = e
            .expected_parameter_bytes
            .is_some_and(|x| e.devices.iter().all(|d| d.parameter_bytes == x));
        let (bound_ok, bound) = match e.n_devices {
            1 => (true, "neutral"),
            2 | 3 => (ratio < 1.0, "< 1"),
            _ => (ratio <= 0.5, "<= 0.5"),
        };
        let pass = matches_plan && bound_ok;
        let detail = format!(
            "N={} per-device parameter bytes {} ratio {:.4} (bound {bound}), plan match {matches_plan}",
            e.n_devices,
            e.max_parameter_bytes(),
            ratio
        );
        checks.push(ScalingCheck {
            n_devices: e.n_devices,
            ratio,
            matches_plan,
            pass,
            detail,
        });
    }
    let pass = checks.iter().all(|c| c.pass) && report.entries.iter().all(BenchEntry::is_ok);
    Ok(Comparison { checks, pass })
}
