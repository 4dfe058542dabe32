//! Position encoders: the wave encoder, which treats descriptors as amplitude
//! and positions as phase, and the plain MLP encoder used as a baseline.
//!
//! Wave encoding of keypoint `j`:
//!
//! ```text
//! A_j = MLP_A(d_j)            (C → C → C)
//! θ_j = MLP_θ(p̂_j)            (3 → C → C)
//! x_j = d_j + MLP_F([A_j ⊙ cos θ_j, A_j ⊙ sin θ_j])   (2C → 2C → C)
//! ```
//!
//! `A ⊙ cos θ` and `A ⊙ sin θ` are the real and imaginary parts of the wave
//! `A ⊙ e^{iθ}`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::nn::{mlp, register_mlp};
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Var};

/// Hidden widths of the MLP baseline encoder between the 3 inputs and `C`.
pub const MLP_PE_HIDDEN: [usize; 3] = [32, 64, 128];

pub fn register_wave_pe(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize) -> Result<()> {
    register_mlp(store, rng, &format!("{prefix}.amplitude"), &[c, c, c], Init::FanIn)?;
    register_mlp(store, rng, &format!("{prefix}.phase"), &[3, c, c], Init::FanIn)?;
    register_mlp(store, rng, &format!("{prefix}.fuse"), &[2 * c, 2 * c, c], Init::Zeros)
}

pub fn register_mlp_pe(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize) -> Result<()> {
    let mut dims = vec![3];
    dims.extend(MLP_PE_HIDDEN);
    dims.push(c);
    register_mlp(store, rng, prefix, &dims, Init::Zeros)
}

/// Intermediate values of one wave encoding.
#[derive(Clone, Copy, Debug)]
pub struct WaveEncoding {
    pub amplitude: Var,
    pub phase: Var,
    pub output: Var,
}

fn expected_dim(store: &ParamStore, name: &str, kp: &KeypointSet) -> Result<()> {
    let w = store.get(name)?;
    if w.cols() != kp.dim() {
        return Err(Error::config(format!(
            "encoder width {} does not match descriptor dim {}",
            w.cols(),
            kp.dim()
        )));
    }
    Ok(())
}

pub fn wave_encode(tape: &mut Tape, store: &ParamStore, prefix: &str, kp: &KeypointSet) -> Result<WaveEncoding> {
    expected_dim(store, &format!("{prefix}.fuse.1.weight"), kp)?;
    let d = tape.constant(kp.descriptors())?;
    let p = tape.constant_raw(kp.len(), 3, kp.normalized_positions())?;
    let amplitude = mlp(tape, store, &format!("{prefix}.amplitude"), 2, d)?;
    let phase = mlp(tape, store, &format!("{prefix}.phase"), 2, p)?;
    let cos = tape.cos(phase)?;
    let sin = tape.sin(phase)?;
    let real = tape.mul(amplitude, cos)?;
    let imag = tape.mul(amplitude, sin)?;
    let wave = tape.concat_cols(&[real, imag])?;
    let fused = mlp(tape, store, &format!("{prefix}.fuse"), 2, wave)?;
    let output = tape.add(d, fused)?;
    Ok(WaveEncoding {
        amplitude,
        phase,
        output,
    })
}

pub fn mlp_encode(tape: &mut Tape, store: &ParamStore, prefix: &str, kp: &KeypointSet) -> Result<Var> {
    let layers = MLP_PE_HIDDEN.len() + 1;
    expected_dim(store, &format!("{prefix}.{}.weight", layers - 1), kp)?;
    let d = tape.constant(kp.descriptors())?;
    let p = tape.constant_raw(kp.len(), 3, kp.normalized_positions())?;
    let enc = mlp(tape, store, prefix, layers, p)?;
    tape.add(d, enc)
}
