use std::path::{Path, PathBuf};

use paraformer::container::Container;
use paraformer::model::WEIGHTS_KIND;
use paraformer::train::{evaluate_loss, learning_rate, Trainer};
use paraformer::{Error, Model};

use crate::commands::{check_compatible, check_output, load_dataset, with_suffix};
use crate::config::{read_file, resolve, Overrides, Preset, RunConfig};
use crate::failure::{contract, usage, CmdResult, Failure};
use crate::manifest::{FileRecord, RunManifest};

#[derive(clap::Args)]
pub struct Args {
    /// TOML file with optional `seed`, `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture the config file is layered onto.
    #[arg(long, value_enum, default_value = "paraformer")]
    preset: Preset,
    #[arg(long)]
    data: PathBuf,
    /// Held-out split; when given, the best checkpoint is chosen by its loss.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training checkpoint, rewritten after every epoch. The best weights go
    /// to `<out>.best`.
    #[arg(long)]
    out: PathBuf,
    /// Continue the checkpoint at `--out` with its stored settings.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in this invocation.
    #[arg(long)]
    stop_after: Option<usize>,
}

fn fresh(a: &Args) -> CmdResult<(RunConfig, Trainer)> {
    let file = a.config.as_deref().map(read_file).transpose()?;
    let flags = Overrides {
        seed: a.seed,
        epochs: a.epochs,
        lr: a.lr,
        threshold: None,
    };
    let rc = resolve(a.preset, file.as_ref(), &flags)?;
    let model = Model::build(&rc.model, rc.seed)?;
    let trainer = Trainer::new(model, rc.train.clone())?;
    Ok((rc, trainer))
}

fn resumed(a: &Args) -> CmdResult<(RunConfig, Trainer)> {
    if a.config.is_some() || a.epochs.is_some() || a.lr.is_some() || a.seed.is_some() {
        return Err(usage("--resume takes its settings from the checkpoint; drop --config/--epochs/--lr/--seed"));
    }
    if !a.out.is_file() {
        return Err(contract(format!("no checkpoint to resume at {}", a.out.display())));
    }
    let stored = Model::stored_config(&Container::read(&a.out)?)?;
    let trainer = Trainer::load_checkpoint(&a.out, &stored)?;
    let rc = RunConfig {
        seed: trainer.config.seed,
        model: stored,
        train: trainer.config.clone(),
    };
    Ok((rc, trainer))
}

/// Best epoch so far by held-out loss if tracked, else by mean training loss.
fn best_score(t: &Trainer) -> Option<f64> {
    t.history
        .iter()
        .map(|s| s.val_loss.unwrap_or(s.mean_loss))
        .fold(None, |b: Option<f64>, v| Some(b.map_or(v, |b| b.min(v))))
}

#[derive(serde::Serialize)]
struct ParamSummary {
    name: String,
    numel: usize,
    non_finite: usize,
    max_abs: f32,
}

fn dump_diagnostics(path: &Path, t: &Trainer, pairs: usize, err: &Error) -> CmdResult {
    let warmup = (t.config.warmup_epochs * pairs as f64).round() as usize;
    let params: Vec<ParamSummary> = t
        .model
        .params
        .iter()
        .map(|(name, p)| ParamSummary {
            name: name.to_string(),
            numel: p.numel(),
            non_finite: p.data().iter().filter(|v| !v.is_finite()).count(),
            max_abs: p.data().iter().filter(|v| v.is_finite()).fold(0.0f32, |m, v| m.max(v.abs())),
        })
        .collect();
    let dump = serde_json::json!({
        "error": err.to_string(),
        "epoch": t.epoch,
        "step": t.step,
        "lr": learning_rate(t.config.lr, t.step, warmup, t.config.epochs * pairs),
        "train": t.config,
        "history": t.history,
        "manifest": t.manifest,
        "params": params,
    });
    let text = serde_json::to_string_pretty(&dump).map_err(|e| contract(e.to_string()))?;
    paraformer::container::write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn run(a: Args) -> CmdResult {
    let (rc, mut trainer) = if a.resume { resumed(&a)? } else { fresh(&a)? };
    let data = load_dataset(&a.data)?;
    check_compatible(&data, &rc.model, "training data")?;
    let val = a.val.as_deref().map(load_dataset).transpose()?;
    if let Some(v) = &val {
        check_compatible(v, &rc.model, "validation data")?;
    }
    if a.stop_after == Some(0) {
        return Err(usage("--stop-after must be at least 1"));
    }
    check_output(&a.out)?;
    if trainer.finished() {
        return Err(contract(format!("checkpoint {} already completed {} epochs", a.out.display(), trainer.epoch)));
    }

    let mut inputs = vec![FileRecord::of(&a.data)?];
    if let Some(v) = &a.val {
        inputs.push(FileRecord::of(v)?);
    }
    let echo = serde_json::to_value(&rc).map_err(|e| contract(e.to_string()))?;
    let mut manifest = RunManifest::new("train", echo, rc.seed, inputs);
    trainer.manifest = Some(manifest.manifest_hash.clone());
    let best_path = with_suffix(&a.out, ".best");
    let dump_path = with_suffix(&a.out, ".nan-dump.json");

    let mut ran = 0;
    while !trainer.finished() && a.stop_after.is_none_or(|k| ran < k) {
        let mut stats = match trainer.train_epoch(&data.pairs) {
            Ok(s) => s,
            Err(e) if e.is_numeric() => {
                dump_diagnostics(&dump_path, &trainer, data.len(), &e)?;
                return Err(Failure::Numeric(format!("{e}; diagnostics in {}", dump_path.display())));
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(v) = &val {
            let loss = evaluate_loss(&trainer.model, &v.pairs)?;
            stats.val_loss = Some(loss);
            trainer.history.last_mut().expect("epoch recorded").val_loss = Some(loss);
        }
        let score = stats.val_loss.unwrap_or(stats.mean_loss);
        let improved = best_score(&trainer).is_some_and(|b| score <= b);
        trainer.save_checkpoint(&a.out)?;
        if improved {
            let extra = serde_json::json!({ "manifest": manifest.manifest_hash, "epoch": stats.epoch });
            trainer.model.weights_writer(WEIGHTS_KIND, extra)?.write(&best_path)?;
        }
        print!(
            "epoch={} loss={:.6} first={:.6} last={:.6} lr={:.3e}",
            stats.epoch, stats.mean_loss, stats.first_loss, stats.last_loss, stats.lr_end
        );
        match stats.val_loss {
            Some(v) => println!(" val={v:.6}{}", if improved { " best" } else { "" }),
            None => println!("{}", if improved { " best" } else { "" }),
        }
        ran += 1;
    }

    manifest.weights_hash = Some(trainer.model.weights_hash()?);
    manifest.epochs = trainer.history.clone();
    let side = manifest.finish(&[&a.out, &best_path])?;
    println!("checkpoint={}", a.out.display());
    println!("best={}", best_path.display());
    println!("manifest={}", side.display());
    Ok(())
}
