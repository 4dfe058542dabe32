//! Central finite-difference checks of analytic gradients.
//!
//! The relative error of one element is `|a − n| / max(|a|, |n|, floor)`.
//! An element whose `±ε` evaluations change a ReLU pattern or a row
//! selection (the tape's branch signature) has no meaningful central
//! difference and is counted as skipped rather than checked.
//!
//! For f64 leaves the differences at `ε` and `ε/2` are combined by Richardson
//! extrapolation, which cancels the `ε²` truncation term that otherwise
//! dominates wherever a higher-order op's gradient nearly cancels.
//! Parameters are stored as f32, so a perturbed parameter is rounded; the
//! difference quotient divides by the perturbation actually applied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{parallel_layer, ParallelLayer, SerialLayer, Sharing};
use crate::data::random_unit;
use crate::error::{Error, Result};
use crate::keypoints::KeypointSet;
use crate::matcher::{matching_loss, score_matrix, Correspondences};
use crate::model::{Model, ModelConfig, PositionEncoding, Variant};
use crate::nn::{linear, mlp, register_linear, register_mlp};
use crate::params::{Init, ParamStore};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;
use crate::unet::{attentional_pool, gpool, unpool, PoolingRecord};
use crate::wave_pe::{mlp_encode, register_mlp_pe, register_wave_pe, wave_encode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Location of the largest error.
    pub worst: String,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Default)]
struct Tally {
    checked: usize,
    skipped: usize,
    max: f64,
    worst: String,
}

impl Tally {
    fn record(&mut self, err: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.max || self.worst.is_empty() {
            self.max = self.max.max(err);
            self.worst = at();
        }
    }

    fn finish(self, name: &str, tol: f64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            checked: self.checked,
            skipped: self.skipped,
            max_rel_err: self.max,
            passed: self.checked > 0 && self.max <= tol,
            worst: self.worst,
        }
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry carries a
/// distinct weight.
pub fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (m, n) = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = tape.constant_raw(m, n, r)?;
    let prod = tape.mul(out, r)?;
    tape.sum_all(prod)
}

/// Checks gradients with respect to f64 leaves `inputs` (rows, cols, values).
pub fn check_leaves<F>(name: &str, inputs: &[(usize, usize, Vec<f64>)], f: F, cfg: &GradCheckConfig) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Vec<f64>], grads: bool| -> Result<(f64, u64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .zip(values)
            .map(|((r, c, _), v)| tape.leaf_raw(*r, *c, v.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let value = tape.scalar(out);
        let mut g = Vec::new();
        if grads {
            tape.backward(out)?;
            g = vars
                .iter()
                .zip(values)
                .map(|(&v, x)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
                .collect();
        }
        Ok((value, tape.branch_signature(), g))
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, _, v)| v.clone()).collect();
    let (_, sig, analytic) = eval(&base, true)?;
    let mut tally = Tally::default();
    for (k, values) in base.iter().enumerate() {
        for e in 0..values.len() {
            let mut diffs = [0.0; 2];
            let mut kink = false;
            for (slot, h) in [cfg.eps, cfg.eps / 2.0].into_iter().enumerate() {
                let mut plus = base.clone();
                plus[k][e] += h;
                let mut minus = base.clone();
                minus[k][e] -= h;
                let (lp, sp, _) = eval(&plus, false)?;
                let (lm, sm, _) = eval(&minus, false)?;
                kink |= sp != sig || sm != sig;
                diffs[slot] = (lp - lm) / (2.0 * h);
            }
            if kink {
                tally.skipped += 1;
                continue;
            }
            let numeric = (4.0 * diffs[1] - diffs[0]) / 3.0;
            let err = rel_err(analytic[k][e], numeric, cfg.floor);
            tally.record(err, || format!("input {k}[{e}]: analytic {:e}, numeric {numeric:e}", analytic[k][e]));
        }
    }
    Ok(tally.finish(name, cfg.tol))
}

/// Checks gradients with respect to every trainable parameter in `store`.
pub fn check_params<F>(name: &str, store: &ParamStore, f: F, cfg: &GradCheckConfig) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok((tape.scalar(out), tape.branch_signature()))
    };
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    let sig = tape.branch_signature();
    tape.backward(root)?;
    let mut work = store.clone();
    let mut tally = Tally::default();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for pname in &names {
        let t = store.get(pname)?;
        if !t.requires_grad() {
            continue;
        }
        let analytic = tape.param_grad(pname).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for e in 0..t.numel() {
            let w = t.data()[e];
            let wp = (w as f64 + cfg.eps) as f32;
            let wm = (w as f64 - cfg.eps) as f32;
            work.get_mut(pname)?.data_mut()[e] = wp;
            let (lp, sp) = eval(&work)?;
            work.get_mut(pname)?.data_mut()[e] = wm;
            let (lm, sm) = eval(&work)?;
            work.get_mut(pname)?.data_mut()[e] = w;
            if sp != sig || sm != sig {
                tally.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (wp as f64 - wm as f64);
            let err = rel_err(analytic[e], numeric, cfg.floor);
            tally.record(err, || format!("{pname}[{e}]: analytic {:e}, numeric {numeric:e}", analytic[e]));
        }
    }
    Ok(tally.finish(name, cfg.tol))
}

/// Replaces every parameter with `U(−1/√rows, 1/√rows)` values so no
/// zero-initialized layer hides a gradient path.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    for (_, t) in store.iter_mut() {
        let bound = 1.0 / (t.shape()[0].max(1) as f32).sqrt();
        for v in t.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    }
    Ok(())
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Differentiable tape ops, each reduced through [`probe`].
pub fn op_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut leaf = |r: usize, c: usize, scale: f64| (r, c, random_values(&mut rng, r * c, scale));
    let a43 = leaf(4, 3, 1.0);
    let b35 = leaf(3, 5, 1.0);
    let b53 = leaf(5, 3, 1.0);
    let a34 = leaf(3, 4, 1.0);
    let c34 = leaf(3, 4, 1.0);
    let row4 = leaf(1, 4, 1.0);
    let col3 = leaf(3, 1, 1.0);
    let s11 = leaf(1, 1, 1.0);
    let sm = leaf(5, 5, 3.0);
    let pos34 = (3, 4, a34.2.iter().map(|v| v.abs() + 0.5).collect::<Vec<_>>());
    let scores45 = leaf(4, 5, 2.0);
    let alpha = (1, 1, vec![0.7]);
    let s = seed;

    type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let cases: Vec<(&str, Vec<(usize, usize, Vec<f64>)>, OpFn)> = vec![
        ("matmul", vec![a43.clone(), b35.clone()], Box::new(move |t, v| {
            let o = t.matmul(v[0], v[1])?;
            probe(t, o, s)
        })),
        ("matmul_nt", vec![a43.clone(), b53.clone()], Box::new(move |t, v| {
            let o = t.matmul_nt(v[0], v[1])?;
            probe(t, o, s)
        })),
        ("matmul_order_free", vec![a43.clone(), b35.clone()], Box::new(move |t, v| {
            let o = t.matmul_order_free(v[0], v[1])?;
            probe(t, o, s)
        })),
        ("transpose", vec![a43.clone()], Box::new(move |t, v| {
            let o = t.transpose(v[0])?;
            probe(t, o, s)
        })),
        ("add_sub_mul", vec![a34.clone(), c34.clone()], Box::new(move |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(v[0], v[1])?;
            let o = t.mul(a, b)?;
            let o = t.mul(o, v[0])?;
            probe(t, o, s)
        })),
        ("add_row_mul_col", vec![a34.clone(), row4, col3], Box::new(move |t, v| {
            let a = t.add_row(v[0], v[1])?;
            let o = t.mul_col(a, v[2])?;
            probe(t, o, s)
        })),
        ("scale_scale_by_powf", vec![pos34.clone(), s11], Box::new(move |t, v| {
            let a = t.scale(v[0], -1.7)?;
            let b = t.scale_by(a, v[1])?;
            let p = t.powf(v[0], -0.5)?;
            let o = t.add(b, p)?;
            probe(t, o, s)
        })),
        ("sigmoid", vec![a34.clone()], Box::new(move |t, v| {
            let o = t.sigmoid(v[0])?;
            probe(t, o, s)
        })),
        ("relu", vec![a34.clone()], Box::new(move |t, v| {
            let o = t.relu(v[0])?;
            probe(t, o, s)
        })),
        ("sin_cos", vec![a34.clone()], Box::new(move |t, v| {
            let a = t.sin(v[0])?;
            let b = t.cos(v[0])?;
            let o = t.mul(a, b)?;
            probe(t, o, s)
        })),
        ("softmax_rows", vec![sm], Box::new(move |t, v| {
            let o = t.softmax_rows(v[0], 0.7)?;
            probe(t, o, s)
        })),
        ("concat_slice", vec![a43.clone(), a43.clone()], Box::new(move |t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            let o = t.slice_cols(c, 1, 4)?;
            probe(t, o, s)
        })),
        ("gather_scatter", vec![a43.clone()], Box::new(move |t, v| {
            let g = t.gather_rows(v[0], &[3, 1, 2])?;
            let o = t.scatter_rows(g, &[4, 0, 2], 6)?;
            probe(t, o, s)
        })),
        ("reduce_sum", vec![a43.clone()], Box::new(move |t, v| {
            let r = t.reduce_sum(v[0], Axis::Rows)?;
            let c = t.reduce_sum(v[0], Axis::Cols)?;
            let a = probe(t, r, s)?;
            let b = probe(t, c, s + 1)?;
            t.add(a, b)
        })),
        ("sum_mean_select", vec![a43.clone()], Box::new(move |t, v| {
            let sel = t.select_entries(v[0], &[(0, 0), (3, 2), (1, 1)])?;
            let a = probe(t, sel, s)?;
            let b = t.mean_all(v[0])?;
            let sq = t.mul(v[0], v[0])?;
            let c = t.sum_all(sq)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        })),
        ("sinkhorn", vec![scores45, alpha], Box::new(move |t, v| {
            let o = t.sinkhorn(v[0], v[1], 20)?;
            probe(t, o, s)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| check_leaves(name, &inputs, f, cfg))
        .collect()
}

fn random_keypoints(rng: &mut ChaCha8Rng, n: usize, c: usize, size: (f32, f32)) -> Result<KeypointSet> {
    let pos: Vec<[f32; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0.0..size.0),
                rng.random_range(0.0..size.1),
                rng.random_range(0.0..=1.0),
            ]
        })
        .collect();
    let desc: Vec<Vec<f32>> = (0..n).map(|_| random_unit(rng, c)).collect();
    KeypointSet::new(Tensor::from_rows(&pos)?, Tensor::from_rows(&desc)?, size)
}

fn random_state(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Parameterized building blocks with randomized weights.
pub fn component_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 8;
    let size = (64.0, 48.0);
    let kp = random_keypoints(&mut rng, 5, c, size)?;
    let x = random_state(&mut rng, 5, c)?;
    let y = random_state(&mut rng, 4, c)?;
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    register_linear(&mut store, &mut rng, "lin", c, 6, Init::FanIn)?;
    register_mlp(&mut store, &mut rng, "mlp", &[c, 7, 3], Init::FanIn)?;
    randomize(&mut store, &mut rng)?;
    out.push(check_params(
        "linear_mlp",
        &store,
        |t, s| {
            let xv = t.constant(&x)?;
            let a = linear(t, s, "lin", xv)?;
            let b = mlp(t, s, "mlp", 2, xv)?;
            let pa = probe(t, a, seed)?;
            let pb = probe(t, b, seed + 1)?;
            t.add(pa, pb)
        },
        cfg,
    )?);

    let mut store = ParamStore::new();
    register_wave_pe(&mut store, &mut rng, "pe", c)?;
    randomize(&mut store, &mut rng)?;
    out.push(check_params(
        "wave_pe",
        &store,
        |t, s| {
            let o = wave_encode(t, s, "pe", &kp)?.output;
            probe(t, o, seed)
        },
        cfg,
    )?);

    let mut store = ParamStore::new();
    register_mlp_pe(&mut store, &mut rng, "pe", c)?;
    randomize(&mut store, &mut rng)?;
    out.push(check_params(
        "mlp_pe",
        &store,
        |t, s| {
            let o = mlp_encode(t, s, "pe", &kp)?;
            probe(t, o, seed)
        },
        cfg,
    )?);

    for (label, sharing) in [("parallel_layer_shared", Sharing::default()), ("parallel_layer_unshared", Sharing::none())] {
        let layer = ParallelLayer::new("layer", c, 2, sharing)?;
        let mut store = ParamStore::new();
        layer.register(&mut store, &mut rng)?;
        randomize(&mut store, &mut rng)?;
        out.push(check_params(
            label,
            &store,
            |t, s| {
                let (xv, yv) = (t.constant(&x)?, t.constant(&y)?);
                let o = parallel_layer(t, s, &layer, xv, yv)?;
                let a = probe(t, o.x, seed)?;
                let b = probe(t, o.y, seed + 1)?;
                t.add(a, b)
            },
            cfg,
        )?);
    }

    let self_layer = SerialLayer::new("self", c, 2)?;
    let cross_layer = SerialLayer::new("cross", c, 2)?;
    let mut store = ParamStore::new();
    self_layer.register(&mut store, &mut rng)?;
    cross_layer.register(&mut store, &mut rng)?;
    randomize(&mut store, &mut rng)?;
    out.push(check_params(
        "serial_layer_pair",
        &store,
        |t, s| {
            let (xv, yv) = (t.constant(&x)?, t.constant(&y)?);
            let (a, b) = crate::attention::serial_layer_pair(t, s, &self_layer, &cross_layer, xv, yv)?;
            let pa = probe(t, a, seed)?;
            let pb = probe(t, b, seed + 1)?;
            t.add(pa, pb)
        },
        cfg,
    )?);

    // Pooling: scores come from a trainable self map and a trainable
    // projection vector; the projection and unpool layers are parameters too.
    let mut store = ParamStore::new();
    register_linear(&mut store, &mut rng, "pool", c, 6, Init::FanIn)?;
    register_linear(&mut store, &mut rng, "unpool", 6, c, Init::FanIn)?;
    store.init(&mut rng, "score", vec![c, 1], Init::FanIn)?;
    store.init(&mut rng, "logits", vec![5, 5], Init::FanIn)?;
    randomize(&mut store, &mut rng)?;
    let x_pool = x.clone();
    out.push(check_params(
        "attentional_pool_unpool",
        &store,
        |t, s| {
            let xv = t.constant(&x_pool)?;
            let logits = t.param("logits", s.get("logits")?)?;
            let map = t.softmax_rows(logits, 3.0)?;
            let (p, rec) = attentional_pool(t, s, xv, map, 3, "pool")?;
            let u = unpool(t, s, p, &rec, "unpool")?;
            probe(t, u, seed)
        },
        cfg,
    )?);
    out.push(check_params(
        "gpool",
        &store,
        |t, s| {
            let xv = t.constant(&x_pool)?;
            let (p, _): (Var, PoolingRecord) = gpool(t, s, xv, "score", 3, "pool")?;
            probe(t, p, seed)
        },
        cfg,
    )?);

    let mut store = ParamStore::new();
    store.init(&mut rng, "bin", vec![1, 1], Init::Constant(0.5))?;
    store.insert("x", x.clone())?;
    store.insert("y", y.clone())?;
    let gt = Correspondences {
        matches: vec![(0, 1), (2, 0), (3, 3)],
        unmatched_x: vec![1, 4],
        unmatched_y: vec![2],
    };
    out.push(check_params(
        "matching_head",
        &store,
        |t, s| {
            let xv = t.param("x", s.get("x")?)?;
            let yv = t.param("y", s.get("y")?)?;
            let alpha = t.param("bin", s.get("bin")?)?;
            let sc = score_matrix(t, xv, yv)?;
            let lp = t.sinkhorn(sc, alpha, 20)?;
            matching_loss(t, lp, &gt)
        },
        cfg,
    )?);
    Ok(out)
}

/// The gradient-check model: parallel variant with Wave-PE, `C = 8`, two
/// layers, two heads and 20 Sinkhorn iterations.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::Paraformer,
        descriptor_dim: 8,
        layers: 2,
        heads: 2,
        pe: PositionEncoding::Wave,
        sinkhorn_iterations: 20,
        ..ModelConfig::paraformer()
    }
}

/// Full forward pass and loss on a random `6 × 6` pair.
pub fn toy_model_check(seed: u64, cfg: &GradCheckConfig) -> Result<CheckResult> {
    let model_cfg = toy_config();
    let mut model = Model::build(&model_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    randomize(&mut model.params, &mut rng)?;
    let size = (64.0, 48.0);
    let kx = random_keypoints(&mut rng, 6, 8, size)?;
    let ky = random_keypoints(&mut rng, 6, 8, size)?;
    let gt = Correspondences {
        matches: vec![(0, 2), (1, 0), (3, 5), (4, 1)],
        unmatched_x: vec![2, 5],
        unmatched_y: vec![3, 4],
    };
    let skeleton = model.clone();
    check_params(
        &format!("toy_model_seed{seed}"),
        &model.params,
        |t, s| {
            let m = skeleton.with_params(s.clone())?;
            Ok(m.loss_on_tape(t, &kx, &ky, &gt)?.0)
        },
        cfg,
    )
}

/// Runs the op suite, the component suite and the toy model over `seeds`.
pub fn full_suite(seeds: &[u64], cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    if seeds.is_empty() {
        return Err(Error::config("gradient check needs at least one seed"));
    }
    let mut out = Vec::new();
    for &s in seeds {
        out.extend(op_suite(s, cfg)?);
        out.extend(component_suite(s, cfg)?);
        out.push(toy_model_check(s, cfg)?);
    }
    Ok(out)
}
