use std::fmt::Write as _;
use std::path::PathBuf;

use paraformer::attention::Sharing;
use paraformer::container::write_atomic;
use paraformer::flops::{count_flops, FlopsBreakdown};
use paraformer::gradcheck::{full_suite, GradCheckConfig};
use paraformer::ModelConfig;

use crate::commands::check_output;
use crate::config::resolve_seed;
use crate::failure::{usage, CmdResult, Failure};

#[derive(clap::Args)]
pub struct FlopsArgs {
    /// Keypoints per image.
    #[arg(long, value_delimiter = ',', default_values_t = [512, 1024, 2048])]
    keypoints: Vec<usize>,
    /// Also write the rows as comma-separated records.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn rows() -> Vec<(&'static str, ModelConfig)> {
    let p = ModelConfig::paraformer();
    vec![
        ("serial_baseline", ModelConfig::serial_baseline()),
        ("paraformer", p.clone()),
        ("paraformer_u", ModelConfig::paraformer_u()),
        (
            "paraformer_no_attn_sharing",
            ModelConfig {
                sharing: Sharing {
                    attn_weights: false,
                    ..p.sharing
                },
                ..p
            },
        ),
    ]
}

fn giga(v: u64) -> f64 {
    v as f64 / 1e9
}

pub fn run_flops(a: FlopsArgs) -> CmdResult {
    if a.keypoints.is_empty() || a.keypoints.contains(&0) {
        return Err(usage("--keypoints needs positive counts"));
    }
    if let Some(p) = &a.csv {
        check_output(p)?;
    }
    let names: Vec<&str> = FlopsBreakdown::default().components().iter().map(|(n, _)| *n).collect();
    let mut csv = format!("keypoints,variant,{},attention_rounds,ratio_vs_serial\n", names.join(","));
    let mut text = String::new();
    for &k in &a.keypoints {
        let counts: Vec<(&str, FlopsBreakdown)> = rows().into_iter().map(|(n, c)| (n, count_flops(&c, k, k))).collect();
        let serial = counts[0].1.total as f64;
        let _ = writeln!(text, "keypoints={k} (GFLOPs per image pair)");
        let _ = write!(text, "{:<28}", "variant");
        for n in &names {
            let _ = write!(text, " {:>16}", n);
        }
        let _ = writeln!(text, " {:>7} {:>8}", "rounds", "ratio");
        for (name, f) in &counts {
            let _ = write!(text, "{name:<28}");
            for (_, v) in f.components() {
                let _ = write!(text, " {:>16.3}", giga(v));
            }
            let ratio = f.total as f64 / serial;
            let _ = writeln!(text, " {:>7} {:>8.4}", f.attention_rounds, ratio);
            let vals: Vec<String> = f.components().iter().map(|(_, v)| v.to_string()).collect();
            let _ = writeln!(csv, "{k},{name},{},{},{ratio:.6}", vals.join(","), f.attention_rounds);
        }
        let sharing = counts[1].1.total as f64 / counts[3].1.total as f64;
        let _ = writeln!(text, "sharing_on_off_ratio={sharing:.4}\n");
    }
    print!("{text}");
    if let Some(p) = &a.csv {
        write_atomic(p, csv.as_bytes())?;
    }
    Ok(())
}

#[derive(clap::Args)]
pub struct GradcheckArgs {
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// First seed; defaults to $PARAFORMER_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = GradCheckConfig::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = GradCheckConfig::default().eps)]
    eps: f64,
}

pub fn run_gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if !(a.tol > 0.0 && a.eps > 0.0) {
        return Err(usage("--tol and --eps must be positive"));
    }
    let first = resolve_seed(a.seed, 0)?;
    let cfg = GradCheckConfig {
        eps: a.eps,
        tol: a.tol,
        ..Default::default()
    };
    let seeds: Vec<u64> = (first..first + a.seeds).collect();
    let results = full_suite(&seeds, &cfg)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {} checked={} skipped={} max_rel_err={:.3e} worst={}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.skipped,
            r.max_rel_err,
            r.worst
        );
        failed += usize::from(!r.passed);
    }
    println!("checks={} failed={failed}", results.len());
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} of {} gradient checks failed", results.len())));
    }
    Ok(())
}
