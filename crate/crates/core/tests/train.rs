use std::f64::consts::PI;

use paraformer::data::{Dataset, PairConfig, PairSample};
use paraformer::train::{epoch_order, evaluate_loss, learning_rate, AdamW, TrainConfig, Trainer};
use paraformer::{Error, Model, ModelConfig, Tape};

fn toy_model() -> ModelConfig {
    ModelConfig {
        descriptor_dim: 8,
        layers: 2,
        heads: 2,
        sinkhorn_iterations: 10,
        ..ModelConfig::paraformer()
    }
}

fn data(pairs: usize, keypoints: usize, dim: usize, seed: u64) -> Vec<PairSample> {
    let cfg = PairConfig {
        keypoints,
        descriptor_dim: dim,
        noise: 0.1,
        ..Default::default()
    };
    Dataset::generate(&cfg, seed, pairs).unwrap().pairs
}

#[test]
fn schedule_warms_up_then_follows_a_cosine() {
    let (base, warmup, total) = (2e-3, 10, 110);
    for s in 0..warmup {
        assert!((learning_rate(base, s, warmup, total) - base * (s + 1) as f64 / 10.0).abs() < 1e-15);
    }
    assert!((learning_rate(base, warmup, warmup, total) - base).abs() < 1e-15);
    for s in warmup..total {
        let t = (s - warmup) as f64 / 100.0;
        let want = base * (1.0 + (PI * t).cos()) / 2.0;
        assert!((learning_rate(base, s, warmup, total) - want).abs() < 1e-15);
    }
    assert!((learning_rate(base, 60, warmup, total) - base / 2.0).abs() < 1e-15);
    assert_eq!(learning_rate(base, total, warmup, total), 0.0);
    assert_eq!(learning_rate(base, 0, 0, 1), base);
}

/// One update written out from the definition, starting from zero moments.
fn first_adamw_step(w: f32, g: f64, lr: f64, cfg: &TrainConfig, clip: f64) -> f32 {
    let g = g * clip;
    let m = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
    let v = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
    let w = w as f64;
    (w - lr * (m / (v.sqrt() + cfg.eps) + cfg.weight_decay * w)) as f32
}

fn check_first_step(clip_norm: f64) {
    let mut model = Model::build(&toy_model(), 4).unwrap();
    let p = &data(1, 12, 8, 3)[0];
    let mut tape = Tape::new();
    let (loss, _) = model.loss_on_tape(&mut tape, &p.x, &p.y, &p.gt).unwrap();
    tape.backward(loss).unwrap();
    let before = model.params.clone();
    let grads: Vec<Vec<f64>> = before.iter().map(|(n, _)| tape.param_grad(n).unwrap().to_vec()).collect();
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    let cfg = TrainConfig { clip_norm, weight_decay: 0.01, ..Default::default() };
    let clip = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };

    let mut opt = AdamW::new(&model);
    let reported = opt.step(&mut model, &tape, 1e-2, &cfg).unwrap();
    assert!((reported - norm).abs() <= 1e-12 * norm);
    for (((_, old), (_, new)), g) in before.iter().zip(model.params.iter()).zip(&grads) {
        for ((&w, &got), &gi) in old.data().iter().zip(new.data()).zip(g) {
            assert_eq!(got, first_adamw_step(w, gi, 1e-2, &cfg, clip));
        }
    }
    assert_eq!(opt.t, 1);
}

#[test]
fn first_adamw_step_matches_the_definition() {
    check_first_step(0.0);
}

#[test]
fn clipping_scales_the_gradient() {
    // Scaled this far down the gradients are comparable to eps, so the
    // clip factor shows up in the update.
    check_first_step(1e-9);
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(5, 0, 50);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(5, 0, 50));
    assert_ne!(a, epoch_order(5, 1, 50));
    assert_ne!(a, epoch_order(6, 0, 50));
}

#[test]
fn resumed_training_reproduces_the_uninterrupted_run() {
    let train = data(6, 16, 8, 11);
    let cfg = TrainConfig { epochs: 3, lr: 1e-3, seed: 2, ..Default::default() };
    let mut straight = Trainer::new(Model::build(&toy_model(), 1).unwrap(), cfg.clone()).unwrap();
    while !straight.finished() {
        straight.train_epoch(&train).unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let mut first = Trainer::new(Model::build(&toy_model(), 1).unwrap(), cfg).unwrap();
    first.train_epoch(&train).unwrap();
    first.save_checkpoint(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::load_checkpoint(&path, &toy_model()).unwrap();
    assert_eq!(resumed.epoch, 1);
    while !resumed.finished() {
        resumed.train_epoch(&train).unwrap();
    }

    assert_eq!(resumed.step, straight.step);
    assert!(resumed.model.params.bit_eq(&straight.model.params));
    assert_eq!(resumed.optimizer, straight.optimizer);
    for (a, b) in resumed.history.iter().zip(&straight.history) {
        assert!((a.mean_loss - b.mean_loss).abs() <= 1e-5);
    }
    assert_eq!(resumed.history, straight.history);
}

#[test]
fn checkpoint_rejects_corruption_and_other_architectures() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let t = Trainer::new(Model::build(&toy_model(), 1).unwrap(), TrainConfig::default()).unwrap();
    t.save_checkpoint(&path).unwrap();
    let other = ModelConfig { layers: 3, ..toy_model() };
    assert!(matches!(Trainer::load_checkpoint(&path, &other), Err(Error::Checkpoint(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    let k = bytes.len() - 3;
    bytes[k] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(Trainer::load_checkpoint(&path, &toy_model()).is_err());

    // Plain weights are not a checkpoint.
    let weights = dir.path().join("w.bin");
    t.model.save(&weights).unwrap();
    assert!(Trainer::load_checkpoint(&weights, &toy_model()).is_err());
}

#[test]
fn nan_parameters_abort_with_a_numeric_error() {
    let train = data(2, 12, 8, 12);
    let mut model = Model::build(&toy_model(), 1).unwrap();
    model.params.get_mut("final_proj.weight").unwrap().data_mut()[0] = f32::NAN;
    let mut t = Trainer::new(model, TrainConfig::default()).unwrap();
    match t.train_epoch(&train) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("epoch 0"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn invalid_settings_are_rejected() {
    let m = || Model::build(&toy_model(), 0).unwrap();
    for cfg in [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { lr: 0.0, ..Default::default() },
        TrainConfig { lr: f64::NAN, ..Default::default() },
        TrainConfig { beta1: 1.0, ..Default::default() },
        TrainConfig { clip_norm: -1.0, ..Default::default() },
    ] {
        assert!(Trainer::new(m(), cfg).is_err());
    }
    let mut t = Trainer::new(m(), TrainConfig::default()).unwrap();
    assert!(t.train_epoch(&[]).is_err());
}

#[test]
fn toy_runs_reduce_the_loss() {
    // C = 32, L = 3, 200 pairs, 20 epochs: at least 9 of 10 seeds end below
    // their starting loss.
    let cfg = ModelConfig {
        descriptor_dim: 32,
        layers: 3,
        heads: 4,
        sinkhorn_iterations: 10,
        ..ModelConfig::paraformer()
    };
    let mut improved = 0;
    for seed in 0..10u64 {
        let train = data(200, 8, 32, 100 + seed);
        let model = Model::build(&cfg, seed).unwrap();
        let initial = evaluate_loss(&model, &train).unwrap();
        let tc = TrainConfig { epochs: 20, lr: 1e-3, seed, ..Default::default() };
        let mut t = Trainer::new(model, tc).unwrap();
        while !t.finished() {
            t.train_epoch(&train).unwrap();
        }
        let fin = evaluate_loss(&t.model, &train).unwrap();
        improved += usize::from(fin < initial);
    }
    assert!(improved >= 9, "{improved}/10 seeds improved");
}
