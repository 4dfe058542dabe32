use std::io::Write;
use std::path::{Path, PathBuf};

use paraformer::container::{write_atomic, Container};
use paraformer::eval::{aggregate, compute_metrics, nn_baseline, MetricsReport};
use paraformer::model::WEIGHTS_KIND;
use paraformer::train::CHECKPOINT_KIND;
use paraformer::{Error, MatchSet, Model, ModelConfig};
use rayon::prelude::*;

use crate::commands::{check_compatible, check_output, load_dataset};
use crate::config::{read_file, resolve, Overrides, Preset};
use crate::failure::{contract, usage, CmdResult};
use crate::manifest::{FileRecord, RunManifest};

#[derive(clap::Args)]
pub struct ModelArgs {
    /// Weights or training checkpoint.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Config the weights must match; defaults to the one stored with them.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paraformer")]
    preset: Preset,
    /// Minimum assignment probability of a reported match.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(clap::Args)]
pub struct MatchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// JSON-lines file with one record per pair.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON-lines file with per-pair and aggregate records.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_model(a: &ModelArgs) -> CmdResult<Option<Model>> {
    let Some(path) = &a.weights else {
        if a.config.is_some() || a.threshold.is_some() {
            return Err(usage("--config and --threshold need --weights"));
        }
        return Ok(None);
    };
    if !path.is_file() {
        return Err(contract(format!("weights {} do not exist", path.display())));
    }
    let c = Container::read(path)?;
    if c.kind() != WEIGHTS_KIND && c.kind() != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("{} holds a {}, not weights", path.display(), c.kind())).into());
    }
    let mut cfg: ModelConfig = match &a.config {
        Some(file) => {
            let table = read_file(file)?;
            resolve(a.preset, Some(&table), &Overrides::default())?.model
        }
        None => Model::stored_config(&c)?,
    };
    if let Some(t) = a.threshold {
        cfg.match_threshold = t;
    }
    cfg.validate()?;
    Ok(Some(Model::from_container(&c, &cfg)?))
}

fn manifest_for(command: &str, model: Option<&Model>, data: &Path, weights: Option<&Path>) -> CmdResult<RunManifest> {
    let mut inputs = vec![FileRecord::of(data)?];
    if let Some(w) = weights {
        inputs.push(FileRecord::of(w)?);
    }
    let echo = serde_json::json!({ "model": model.map(|m| &m.config) });
    let seed = model.map_or(0, |m| m.config.seed);
    Ok(RunManifest::new(command, echo, seed, inputs))
}

fn json_lines(records: &[serde_json::Value]) -> CmdResult<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| contract(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn run_model(model: &Model, data: &paraformer::data::Dataset) -> CmdResult<Vec<MatchSet>> {
    let sets = data
        .pairs
        .par_iter()
        .map(|p| model.forward(&p.x, &p.y).map(|o| o.matches))
        .collect::<paraformer::Result<Vec<_>>>()?;
    Ok(sets)
}

pub fn run_match(a: MatchArgs) -> CmdResult {
    let model = load_model(&a.model)?.ok_or_else(|| usage("match needs --weights"))?;
    let data = load_dataset(&a.data)?;
    check_compatible(&data, &model.config, "dataset")?;
    check_output(&a.out)?;

    let mut manifest = manifest_for("match", Some(&model), &a.data, a.model.weights.as_deref())?;
    let sets = run_model(&model, &data)?;
    let mut records = vec![serde_json::json!({ "manifest": manifest.manifest_hash })];
    for (k, s) in sets.iter().enumerate() {
        let m: Vec<_> = s.matches.iter().map(|m| serde_json::json!([m.i, m.j, m.confidence])).collect();
        records.push(serde_json::json!({ "pair": k, "matches": m }));
    }
    write_atomic(&a.out, &json_lines(&records)?)?;
    let total: usize = sets.iter().map(|s| s.matches.len()).sum();
    manifest.weights_hash = Some(model.weights_hash()?);
    let side = manifest.finish(&[&a.out])?;
    println!("pairs={}", sets.len());
    println!("matches={total}");
    println!("out={}", a.out.display());
    println!("manifest={}", side.display());
    Ok(())
}

fn print_report(prefix: &str, r: &MetricsReport) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{prefix}.precision={:.6}", r.precision);
    let _ = writeln!(out, "{prefix}.recall={:.6}", r.recall);
    let _ = writeln!(out, "{prefix}.f1={:.6}", r.f1);
    let _ = writeln!(out, "{prefix}.auc10={:.6}", r.auc10);
    let mma: Vec<String> = r.mma.iter().map(|v| format!("{v:.4}")).collect();
    let _ = writeln!(out, "{prefix}.mma={}", mma.join(","));
    let _ = writeln!(out, "{prefix}.tp={} {prefix}.fp={} {prefix}.fn={}", r.tp, r.fp, r.fn_);
    let _ = writeln!(out, "{prefix}.matches={} {prefix}.gt_matches={}", r.matches, r.gt_matches);
}

fn record(method: &str, pair: Option<usize>, r: &MetricsReport) -> CmdResult<serde_json::Value> {
    let mut v = serde_json::to_value(r).map_err(|e| contract(e.to_string()))?;
    v["method"] = method.into();
    v["pair"] = pair.map_or(serde_json::Value::Null, Into::into);
    Ok(v)
}

pub fn run_eval(a: EvalArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    if let Some(m) = &model {
        check_compatible(&data, &m.config, "dataset")?;
    } else if data.is_empty() {
        return Err(contract("dataset holds no pairs"));
    }
    if let Some(out) = &a.out {
        check_output(out)?;
    }

    let mut manifest = manifest_for("eval", model.as_ref(), &a.data, a.model.weights.as_deref())?;
    let mut methods: Vec<(&str, Vec<MetricsReport>)> = Vec::new();
    if let Some(m) = &model {
        let sets = run_model(m, &data)?;
        let reports = sets.iter().zip(&data.pairs).map(|(s, p)| compute_metrics(s, p)).collect();
        methods.push(("model", reports));
    }
    for (name, mutual) in [("nn_mutual", true), ("nn", false)] {
        let reports = data
            .pairs
            .par_iter()
            .map(|p| compute_metrics(&nn_baseline(&p.x, &p.y, mutual), p))
            .collect();
        methods.push((name, reports));
    }

    let mut records = vec![serde_json::json!({ "manifest": manifest.manifest_hash })];
    let mut summary = serde_json::Map::new();
    println!("pairs={}", data.len());
    for (name, reports) in &methods {
        let agg = aggregate(reports);
        print_report(name, &agg);
        for (k, r) in reports.iter().enumerate() {
            records.push(record(name, Some(k), r)?);
        }
        records.push(record(name, None, &agg)?);
        summary.insert(name.to_string(), serde_json::to_value(&agg).map_err(|e| contract(e.to_string()))?);
    }
    if let Some(out) = &a.out {
        write_atomic(out, &json_lines(&records)?)?;
        manifest.metrics = Some(summary.into());
        if let Some(m) = &model {
            manifest.weights_hash = Some(m.weights_hash()?);
        }
        let side = manifest.finish(&[out])?;
        println!("manifest={}", side.display());
    }
    Ok(())
}
