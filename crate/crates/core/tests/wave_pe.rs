use paraformer::data::random_unit;
use paraformer::gradcheck::randomize;
use paraformer::params::ParamStore;
use paraformer::wave_pe::{mlp_encode, register_mlp_pe, register_wave_pe, wave_encode, MLP_PE_HIDDEN};
use paraformer::{KeypointSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn keypoints(rng: &mut ChaCha8Rng, n: usize, c: usize) -> KeypointSet {
    let pos: Vec<f32> = (0..n)
        .flat_map(|_| [rng.random_range(0.0..64.0f32), rng.random_range(0.0..48.0f32), rng.random_range(0.0..1.0f32)])
        .collect();
    let desc: Vec<f32> = (0..n).flat_map(|_| random_unit(rng, c)).collect();
    KeypointSet::new(Tensor::new(vec![n, 3], pos).unwrap(), Tensor::new(vec![n, c], desc).unwrap(), (64.0, 48.0)).unwrap()
}

/// One linear layer applied to a single row.
fn lin_row(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.get(&format!("{name}.weight")).unwrap();
    let b = store.get(&format!("{name}.bias")).unwrap();
    (0..w.cols())
        .map(|o| b.get(0, o) as f64 + x.iter().enumerate().map(|(k, v)| v * w.get(k, o) as f64).sum::<f64>())
        .collect()
}

fn mlp_row(store: &ParamStore, prefix: &str, layers: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in 0..layers {
        h = lin_row(store, &format!("{prefix}.{l}"), &h);
        if l + 1 < layers {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

/// Position `(x, y)` centred on the image and divided by its longer side.
fn normalized(kp: &KeypointSet, j: usize) -> [f64; 3] {
    let p = kp.positions().row(j);
    [(p[0] as f64 - 32.0) / 64.0, (p[1] as f64 - 24.0) / 64.0, p[2] as f64]
}

#[test]
fn wave_encoding_matches_per_keypoint_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let c = 6;
    let mut store = ParamStore::new();
    register_wave_pe(&mut store, &mut rng, "pe", c).unwrap();
    randomize(&mut store, &mut rng).unwrap();
    let kp = keypoints(&mut rng, 9, c);
    let mut tape = Tape::new();
    let enc = wave_encode(&mut tape, &store, "pe", &kp).unwrap();
    let out = tape.value(enc.output).to_vec();
    for j in 0..kp.len() {
        let d: Vec<f64> = kp.descriptors().row(j).iter().map(|&v| v as f64).collect();
        let amp = mlp_row(&store, "pe.amplitude", 2, &d);
        let phase = mlp_row(&store, "pe.phase", 2, &normalized(&kp, j));
        let mut wave: Vec<f64> = amp.iter().zip(&phase).map(|(a, t)| a * t.cos()).collect();
        wave.extend(amp.iter().zip(&phase).map(|(a, t)| a * t.sin()));
        let fused = mlp_row(&store, "pe.fuse", 2, &wave);
        for k in 0..c {
            let want = d[k] + fused[k];
            assert!((out[j * c + k] - want).abs() < 1e-12, "kp {j} ch {k}");
            assert!((tape.value(enc.amplitude)[j * c + k] - amp[k]).abs() < 1e-12);
            assert!((tape.value(enc.phase)[j * c + k] - phase[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn wave_magnitude_equals_amplitude() {
    // |A e^{iθ}| = |A| for every channel.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let c = 4;
    let mut store = ParamStore::new();
    register_wave_pe(&mut store, &mut rng, "pe", c).unwrap();
    randomize(&mut store, &mut rng).unwrap();
    let kp = keypoints(&mut rng, 5, c);
    let mut tape = Tape::new();
    let enc = wave_encode(&mut tape, &store, "pe", &kp).unwrap();
    let cos = tape.cos(enc.phase).unwrap();
    let sin = tape.sin(enc.phase).unwrap();
    let re = tape.mul(enc.amplitude, cos).unwrap();
    let im = tape.mul(enc.amplitude, sin).unwrap();
    for e in 0..5 * c {
        let mag = tape.value(re)[e].hypot(tape.value(im)[e]);
        assert!((mag - tape.value(enc.amplitude)[e].abs()).abs() < 1e-12);
    }
}

#[test]
fn fresh_encoders_start_as_identity() {
    // The last layer is zero-initialized, so an untrained encoder passes
    // descriptors through unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let c = 8;
    let kp = keypoints(&mut rng, 4, c);
    let mut store = ParamStore::new();
    register_wave_pe(&mut store, &mut rng, "w", c).unwrap();
    register_mlp_pe(&mut store, &mut rng, "m", c).unwrap();
    let mut tape = Tape::new();
    let w = wave_encode(&mut tape, &store, "w", &kp).unwrap().output;
    let m = mlp_encode(&mut tape, &store, "m", &kp).unwrap();
    let d: Vec<f64> = kp.descriptors().data().iter().map(|&v| v as f64).collect();
    assert_eq!(tape.value(w), &d[..]);
    assert_eq!(tape.value(m), &d[..]);
}

#[test]
fn mlp_encoding_matches_per_keypoint_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let c = 5;
    let mut store = ParamStore::new();
    register_mlp_pe(&mut store, &mut rng, "pe", c).unwrap();
    randomize(&mut store, &mut rng).unwrap();
    let kp = keypoints(&mut rng, 6, c);
    let mut tape = Tape::new();
    let out = mlp_encode(&mut tape, &store, "pe", &kp).unwrap();
    for j in 0..kp.len() {
        let enc = mlp_row(&store, "pe", MLP_PE_HIDDEN.len() + 1, &normalized(&kp, j));
        for k in 0..c {
            let want = kp.descriptors().get(j, k) as f64 + enc[k];
            assert!((tape.value(out)[j * c + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn encoding_is_row_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let c = 8;
    let mut store = ParamStore::new();
    register_wave_pe(&mut store, &mut rng, "pe", c).unwrap();
    randomize(&mut store, &mut rng).unwrap();
    let kp = keypoints(&mut rng, 12, c);
    let perm = [3, 0, 11, 5, 7, 1, 2, 10, 4, 9, 8, 6];
    let mut tape = Tape::new();
    let base = wave_encode(&mut tape, &store, "pe", &kp).unwrap().output;
    let moved = wave_encode(&mut tape, &store, "pe", &kp.permuted(&perm).unwrap()).unwrap().output;
    for (r, &p) in perm.iter().enumerate() {
        for k in 0..c {
            assert_eq!(tape.value(moved)[r * c + k].to_bits(), tape.value(base)[p * c + k].to_bits());
        }
    }
}

#[test]
fn width_mismatch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let mut store = ParamStore::new();
    register_wave_pe(&mut store, &mut rng, "pe", 8).unwrap();
    let kp = keypoints(&mut rng, 3, 4);
    assert!(wave_encode(&mut Tape::new(), &store, "pe", &kp).is_err());
}
