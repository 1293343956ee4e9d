mod common;

use tplora_core::data::{AlpacaDataset, AlpacaExample};
use tplora_core::lora::closed_form_parameter_count;
use tplora_core::model::{init_params, ModelConfig, ModelParams};
use tplora_core::tensor::Tensor;
use tplora_core::train::{
    adam_step, evaluate, load_checkpoint, train_with_base, AdamParams, AdamSlot, TrainConfig, Trainer,
};
use tplora_core::Error;

use common::random_tensor;

fn model() -> ModelConfig {
    ModelConfig::new(259, 32, 4, 2, 64, 128)
}

fn dataset() -> AlpacaDataset {
    AlpacaDataset::whole(vec![
        AlpacaExample::new("Say hi", None, "hi"),
        AlpacaExample::new("Echo", Some("abc"), "abc"),
        AlpacaExample::new("Count", None, "1 2 3"),
    ])
}

fn config(n_steps: usize) -> TrainConfig {
    TrainConfig {
        lora_r: 4,
        lora_alpha: 8.0,
        learning_rate: 1e-2,
        batch_size: 2,
        max_len: 128,
        ..TrainConfig::new("unused.jtc", n_steps)
    }
}

#[test]
fn adam_matches_three_step_oracle() {
    let hp = AdamParams::with_lr(0.05);
    let p0 = random_tensor(&[2, 3], 1.0, 1);
    let grads: Vec<Tensor> = (0..3).map(|i| random_tensor(&[2, 3], 1.0, 10 + i)).collect();
    let mut slot = AdamSlot::zeros(6);
    let mut p = p0.clone();
    for (t, g) in grads.iter().enumerate() {
        p = adam_step(&p, g, &mut slot, t as u64 + 1, &hp).unwrap();
    }
    // f64 reference of the same recurrences.
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.05f64);
    for i in 0..6 {
        let (mut w, mut m, mut v) = (p0.data()[i] as f64, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let g = g.data()[i] as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = t as i32 + 1;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!((w - p.data()[i] as f64).abs() < 1e-5, "elem {i}");
    }
}

#[test]
fn first_loss_equals_base_model_loss() {
    let c = model();
    let p = init_params(&c, 0).unwrap();
    let ds = dataset();
    let cfg = config(1);
    let mut trainer = Trainer::new(&cfg, &c, &p, &ds).unwrap();
    let rec = trainer.step().unwrap();
    let base = evaluate(&c, &p, None, &ds.examples[..2], &cfg).unwrap();
    assert!((rec.loss - base).abs() < 1e-6, "{} vs {base}", rec.loss);
}

#[test]
fn loss_trajectory_is_independent_of_device_count() {
    let c = model();
    let p = init_params(&c, 1).unwrap();
    let ds = dataset();
    let run = |n| {
        let cfg = TrainConfig { n_devices: n, ..config(5) };
        train_with_base(&cfg, &c, &p, &ds, None, |_| {}).unwrap()
    };
    let reference = run(1);
    for n in [2, 4] {
        let other = run(n);
        for (a, b) in reference.report.losses.iter().zip(&other.report.losses) {
            assert!(((a - b) / a).abs() < 1e-3, "N={n}: {a} vs {b}");
        }
        let (x, y) = (&reference.adapters.layers[1].v, &other.adapters.layers[1].v);
        assert!(x.b().max_abs_diff(y.b()).unwrap() < 1e-3);
    }
}

#[test]
fn replicated_factors_stay_identical_across_devices() {
    let c = model();
    let p = init_params(&c, 2).unwrap();
    let cfg = TrainConfig { n_devices: 4, ..config(3) };
    let mut trainer = Trainer::new(&cfg, &c, &p, &dataset()).unwrap();
    for _ in 0..3 {
        trainer.step().unwrap();
    }
    let devices = trainer.device_adapters();
    for d in &devices[1..] {
        for (a, b) in d.layers.iter().zip(&devices[0].layers) {
            assert!(a.q.a().bit_eq(b.q.a()));
            assert!(a.v.a().bit_eq(b.v.a()));
        }
    }
    assert_eq!(devices[0].layers[0].q.b().shape(), [8, 4]);
}

#[test]
fn base_stays_frozen_and_only_adapters_train() {
    let c = model();
    let p = init_params(&c, 3).unwrap();
    let before = p.fingerprint();
    let cfg = TrainConfig { n_devices: 2, ..config(4) };
    let out = train_with_base(&cfg, &c, &p, &dataset(), None, |_| {}).unwrap();
    assert_eq!(out.report.base_fingerprint_before, before);
    assert_eq!(out.report.base_fingerprint_after, before);
    assert_eq!(p.fingerprint(), before);
    assert_eq!(out.report.trainable_parameters, closed_form_parameter_count(&c, 4));
    let trainer = Trainer::new(&cfg, &c, &p, &dataset()).unwrap();
    assert_eq!(trainer.optimizer_tensor_count(), 4 * c.n_layers);
    assert!(out.adapters.layers.iter().any(|l| l.q.b().data().iter().any(|&v| v != 0.0)));
}

#[test]
fn identical_runs_are_bit_identical() {
    let c = model();
    let p = init_params(&c, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { lora_dropout: 0.2, ..config(4) };
    let paths = [dir.path().join("a.jtc"), dir.path().join("b.jtc")];
    let reports: Vec<_> = paths
        .iter()
        .map(|path| train_with_base(&cfg, &c, &p, &dataset(), Some(path), |_| {}).unwrap().report)
        .collect();
    assert_eq!(reports[0].losses, reports[1].losses);
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());
    let other = train_with_base(&TrainConfig { seed: 9, ..cfg.clone() }, &c, &p, &dataset(), None, |_| {}).unwrap();
    assert_ne!(other.report.losses, reports[0].losses);
}

#[test]
fn checkpoint_round_trips_adapters_and_metadata() {
    let c = model();
    let p = init_params(&c, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.jtc");
    let cfg = config(3);
    let out = train_with_base(&cfg, &c, &p, &dataset(), Some(&path), |_| {}).unwrap();
    let (set, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta.step, 3);
    assert_eq!(meta.r, 4);
    assert_eq!(meta.alpha, 8.0);
    assert_eq!(meta.model_config, c);
    for (a, b) in set.named_tensors().iter().zip(out.adapters.named_tensors()) {
        assert_eq!(a.0, b.0);
        assert!(a.1.bit_eq(b.1));
    }
    // Reloaded adapters reproduce the trained model's eval loss exactly.
    let l1 = evaluate(&c, &p, Some(&set), &dataset().examples, &cfg).unwrap();
    let l2 = evaluate(&c, &p, Some(&out.adapters), &dataset().examples, &cfg).unwrap();
    assert_eq!(l1, l2);
}

#[test]
fn invalid_configs_fail_before_training() {
    let c = model();
    let p = init_params(&c, 0).unwrap();
    let ds = dataset();
    for bad in [
        TrainConfig { lora_r: 0, ..config(1) },
        TrainConfig { lora_dropout: 1.0, ..config(1) },
        TrainConfig { learning_rate: 0.0, ..config(1) },
        TrainConfig { batch_size: 0, ..config(1) },
    ] {
        assert!(Trainer::new(&bad, &c, &p, &ds).is_err());
    }
    let three = TrainConfig { n_devices: 3, ..config(1) };
    assert!(matches!(Trainer::new(&three, &c, &p, &ds), Err(Error::Divisibility { .. })));
    assert!(matches!(
        Trainer::new(&config(1), &c, &p, &AlpacaDataset::whole(vec![])),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn config_file_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"base_params_path": "b.jtc", "n_steps": 3}"#).unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!((cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout), (16, 16.0, 0.05));
    assert_eq!((cfg.n_devices, cfg.batch_size, cfg.learning_rate), (1, 1, 1e-4));
    assert!(!cfg.mask_prompt);
    std::fs::write(&path, r#"{"base_params_path": "b.jtc", "n_steps": 3, "lora_rank": 4}"#).unwrap();
    assert!(TrainConfig::load(&path).is_err());
    assert!(matches!(TrainConfig::load(&dir.path().join("missing.json")), Err(Error::Io { .. })));
}

#[test]
fn non_finite_loss_is_reported() {
    let c = model();
    let mut p: ModelParams = init_params(&c, 0).unwrap();
    p.lm_head = Tensor::full(p.lm_head.shape(), f32::NAN);
    let mut trainer = Trainer::new(&config(1), &c, &p, &dataset()).unwrap();
    let err = trainer.step().unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0 }));
    assert_eq!(err.category(), tplora_core::ErrorCategory::Numeric);
}
