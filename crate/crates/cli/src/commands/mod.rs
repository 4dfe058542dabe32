pub mod gen_data;
pub mod infer;
pub mod report;
pub mod train;

use std::path::{Path, PathBuf};

use paraformer::data::Dataset;
use paraformer::ModelConfig;

use crate::failure::{contract, CmdResult};

/// Rejects an output path that cannot be written, before any work starts.
pub fn check_output(path: &Path) -> CmdResult {
    if path.is_dir() {
        return Err(contract(format!("output {} is a directory", path.display())));
    }
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if !parent.is_dir() {
        return Err(contract(format!("output directory {} does not exist", parent.display())));
    }
    let meta = std::fs::metadata(&parent).map_err(|e| contract(format!("{}: {e}", parent.display())))?;
    if meta.permissions().readonly() {
        return Err(contract(format!("output directory {} is read-only", parent.display())));
    }
    Ok(())
}

/// `path` with `suffix` appended to its file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn load_dataset(path: &Path) -> CmdResult<Dataset> {
    if !path.is_file() {
        return Err(contract(format!("dataset {} does not exist", path.display())));
    }
    Ok(Dataset::load(path)?)
}

/// Checks that every pair of `data` can go through a model built from `cfg`.
pub fn check_compatible(data: &Dataset, cfg: &ModelConfig, what: &str) -> CmdResult {
    if data.is_empty() {
        return Err(contract(format!("{what} holds no pairs")));
    }
    if data.meta.config.descriptor_dim != cfg.descriptor_dim {
        return Err(contract(format!(
            "{what} has {}-dimensional descriptors, the model expects {}",
            data.meta.config.descriptor_dim, cfg.descriptor_dim
        )));
    }
    let fewest = data.pairs.iter().map(|p| p.x.len().min(p.y.len())).min().unwrap_or(0);
    if fewest < cfg.min_points() {
        return Err(contract(format!(
            "{what} has a pair with {fewest} keypoints, the model needs at least {}",
            cfg.min_points()
        )));
    }
    Ok(())
}
