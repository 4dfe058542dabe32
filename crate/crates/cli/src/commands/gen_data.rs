use std::path::PathBuf;

use paraformer::data::{make_indexed_pair, Dataset, DatasetMeta, PairConfig};
use rayon::prelude::*;

use crate::commands::check_output;
use crate::config::resolve_seed;
use crate::failure::{usage, CmdResult};
use crate::manifest::{FileRecord, RunManifest};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    pairs: usize,
    #[arg(long)]
    keypoints: usize,
    /// Descriptor noise σ.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Defaults to $PARAFORMER_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 256)]
    descriptor_dim: usize,
    /// Fraction of keypoints per image with no counterpart.
    #[arg(long)]
    distractor_frac: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: Args) -> CmdResult {
    let seed = resolve_seed(a.seed, 0)?;
    let defaults = PairConfig::default();
    let cfg = PairConfig {
        keypoints: a.keypoints,
        descriptor_dim: a.descriptor_dim,
        noise: a.noise,
        distractor_frac: a.distractor_frac.unwrap_or(defaults.distractor_frac),
        ..defaults
    };
    if a.pairs == 0 {
        return Err(usage("--pairs must be at least 1"));
    }
    cfg.validate()?;
    check_output(&a.out)?;

    let echo = serde_json::json!({ "pairs": a.pairs, "data": cfg });
    let mut manifest = RunManifest::new("gen-data", echo, seed, Vec::new());
    let pairs = (0..a.pairs as u64)
        .into_par_iter()
        .map(|k| make_indexed_pair(&cfg, seed, k))
        .collect::<paraformer::Result<Vec<_>>>()?;
    let data = Dataset {
        meta: DatasetMeta {
            config: cfg,
            seed,
            pairs: a.pairs,
            manifest: Some(manifest.manifest_hash.clone()),
        },
        pairs,
    };
    data.save(&a.out)?;
    let side = manifest.finish(&[&a.out])?;

    let gt: Vec<usize> = data.pairs.iter().map(|p| p.gt.matches.len()).collect();
    let ys: usize = data.pairs.iter().map(|p| p.y.len()).sum();
    println!("pairs={}", data.len());
    println!("keypoints_x={}", a.keypoints);
    println!("mean_keypoints_y={:.2}", ys as f64 / data.len() as f64);
    println!("mean_gt_matches={:.2}", gt.iter().sum::<usize>() as f64 / gt.len() as f64);
    println!("min_gt_matches={}", gt.iter().min().copied().unwrap_or(0));
    println!("seed={seed}");
    println!("sha256={}", FileRecord::of(&a.out)?.sha256);
    println!("manifest={}", side.display());
    Ok(())
}
