//! Linear layers and small MLPs expressed on the tape.
//!
//! A linear layer named `p` owns `p.weight` (`in × out`) and `p.bias`
//! (`1 × out`) and computes `x · W + b`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};

pub fn register_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    din: usize,
    dout: usize,
    init: Init,
) -> Result<()> {
    store.init(rng, format!("{name}.weight"), vec![din, dout], init)?;
    store.init(rng, format!("{name}.bias"), vec![1, dout], Init::Zeros)
}

pub fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let wname = format!("{name}.weight");
    let w = store.get(&wname)?;
    let (rows, cols) = tape.shape(x);
    if w.rows() != cols {
        return Err(Error::config(format!(
            "{wname} expects {} input features, got {rows}x{cols}",
            w.rows()
        )));
    }
    let w = tape.param(&wname, w)?;
    let bname = format!("{name}.bias");
    let b = tape.param(&bname, store.get(&bname)?)?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Registers `{prefix}.0 … {prefix}.{n-1}` for the widths
/// `dims[0] → dims[1] → … → dims[n]`. Hidden layers use Kaiming-uniform;
/// the last layer uses `last`.
pub fn register_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dims: &[usize], last: Init) -> Result<()> {
    let n = dims.len() - 1;
    for (i, pair) in dims.windows(2).enumerate() {
        let init = if i + 1 == n { last } else { Init::KaimingUniform };
        register_linear(store, rng, &format!("{prefix}.{i}"), pair[0], pair[1], init)?;
    }
    Ok(())
}

/// Applies `layers` linear layers with ReLU between them (not after the last).
pub fn mlp(tape: &mut Tape, store: &ParamStore, prefix: &str, layers: usize, mut x: Var) -> Result<Var> {
    for i in 0..layers {
        x = linear(tape, store, &format!("{prefix}.{i}"), x)?;
        if i + 1 < layers {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}
