//! AdamW training with linear warm-up and cosine decay, one pair per step,
//! plus checkpoints that resume bit-exactly.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Writer};
use crate::data::PairSample;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tape::Tape;

pub const CHECKPOINT_KIND: &str = "paraformer-checkpoint";
pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: DEFAULT_LR,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 1.0,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.warmup_epochs >= 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid training settings {self:?}")))
        }
    }
}

/// Learning rate at `step` of `total`: linear warm-up over `warmup` steps,
/// then cosine decay to zero.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * t).cos())
}

/// AdamW moments, one pair of buffers per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update from the gradients on `tape`. Parameters without a
    /// gradient (unused, or frozen) keep their values and moments.
    pub fn step(&mut self, model: &mut Model, tape: &Tape, lr: f64, cfg: &TrainConfig) -> Result<f64> {
        self.t += 1;
        let grads: Vec<Option<Vec<f64>>> = model
            .params
            .iter()
            .map(|(name, p)| {
                if p.requires_grad() {
                    tape.param_grad(name).map(<[f64]>::to_vec)
                } else {
                    None
                }
            })
            .collect();
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm {norm}")));
        }
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (k, ((_, p), g)) in model.params.iter_mut().zip(&grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (idx, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[idx] * clip;
                m[idx] = cfg.beta1 * m[idx] + (1.0 - cfg.beta1) * gi;
                v[idx] = cfg.beta2 * v[idx] + (1.0 - cfg.beta2) * gi * gi;
                let update = (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + cfg.eps);
                let wf = *w as f64;
                *w = (wf - lr * (update + cfg.weight_decay * wf)) as f32;
            }
        }
        Ok(norm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub first_loss: f64,
    pub last_loss: f64,
    pub lr_end: f64,
    /// Held-out loss, filled in by callers that track one.
    #[serde(default)]
    pub val_loss: Option<f64>,
}

/// Training state: model, optimizer, position in the schedule and history.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub step: usize,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    /// Run manifest hash recorded in saved checkpoints.
    pub manifest: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train: TrainConfig,
    step: usize,
    epoch: usize,
    history: Vec<EpochStats>,
    adam_t: u64,
    #[serde(default)]
    manifest: Option<String>,
}

/// Visit order of `n` pairs in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03));
    order.shuffle(&mut rng);
    order
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamW::new(&model),
            model,
            config,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            manifest: None,
        })
    }

    fn total_steps(&self, pairs: usize) -> (usize, usize) {
        let warmup = (self.config.warmup_epochs * pairs as f64).round() as usize;
        (warmup, self.config.epochs * pairs)
    }

    /// One optimizer step on `sample`; returns the pre-update loss.
    pub fn train_step(&mut self, sample: &PairSample, pairs_per_epoch: usize) -> Result<f64> {
        let (warmup, total) = self.total_steps(pairs_per_epoch);
        let lr = learning_rate(self.config.lr, self.step, warmup, total);
        let mut tape = Tape::new();
        let (loss, _) = self.model.loss_on_tape(&mut tape, &sample.x, &sample.y, &sample.gt)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        tape.backward(loss)?;
        self.optimizer.step(&mut self.model, &tape, lr, &self.config)?;
        self.step += 1;
        Ok(value)
    }

    /// Runs the next epoch over `data` in a seeded shuffled order.
    pub fn train_epoch(&mut self, data: &[PairSample]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::EmptyInput("training set has no pairs".into()));
        }
        let order = epoch_order(self.config.seed, self.epoch, data.len());
        let mut losses = Vec::with_capacity(data.len());
        for &k in &order {
            let loss = self.train_step(&data[k], data.len()).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "epoch {} step {} (pair {k}): {msg}",
                    self.epoch, self.step
                )),
                other => other,
            })?;
            losses.push(loss);
        }
        let (warmup, total) = self.total_steps(data.len());
        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            first_loss: losses[0],
            last_loss: *losses.last().expect("non-empty"),
            lr_end: learning_rate(self.config.lr, self.step.saturating_sub(1), warmup, total),
            val_loss: None,
        };
        self.history.push(stats.clone());
        self.epoch += 1;
        Ok(stats)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            train: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            history: self.history.clone(),
            adam_t: self.optimizer.t,
            manifest: self.manifest.clone(),
        };
        let extra = serde_json::to_value(&meta).map_err(|e| Error::contract(e.to_string()))?;
        let mut w: Writer = self.model.weights_writer(CHECKPOINT_KIND, extra)?;
        for (k, (name, p)) in self.model.params.iter().enumerate() {
            w.f64(&format!("optim.m.{name}"), p.shape(), &self.optimizer.m[k])?;
            w.f64(&format!("optim.v.{name}"), p.shape(), &self.optimizer.v[k])?;
        }
        w.write(path)
    }

    /// Restores a trainer; `cfg` must describe the same architecture.
    pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let c = Container::read(path)?;
        c.expect_kind(CHECKPOINT_KIND)?;
        let model = Model::from_container(&c, cfg)?;
        let extra = c
            .meta()
            .get("extra")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing training state".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_value(extra).map_err(|e| Error::Checkpoint(format!("training state: {e}")))?;
        let mut optimizer = AdamW::new(&model);
        optimizer.t = meta.adam_t;
        for (k, (name, p)) in model.params.iter().enumerate() {
            for (slot, kind) in [(&mut optimizer.m[k], "m"), (&mut optimizer.v[k], "v")] {
                let (shape, data) = c
                    .f64(&format!("optim.{kind}.{name}"))
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                if shape != p.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state for {name} has shape {shape:?}")));
                }
                *slot = data;
            }
        }
        Ok(Self {
            model,
            optimizer,
            config: meta.train,
            step: meta.step,
            epoch: meta.epoch,
            history: meta.history,
            manifest: meta.manifest,
        })
    }
}

/// Mean matching loss over `data` without updating anything.
pub fn evaluate_loss(model: &Model, data: &[PairSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for s in data {
        let mut tape = Tape::new();
        let (loss, _) = model.loss_on_tape(&mut tape, &s.x, &s.y, &s.gt)?;
        total += tape.scalar(loss);
    }
    Ok(total / data.len() as f64)
}
