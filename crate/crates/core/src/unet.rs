//! Encoder–decoder over point sets: parallel-attention stages separated by
//! pooling (encoder) and unpooling (decoder), with additive skip connections.
//!
//! Attentional pooling scores each point by the column sum of the
//! head-averaged self-attention map, keeps the top-k, projects them and gates
//! them with `sigmoid(score)`. Unpooling projects and scatters the kept rows
//! back to their original indices, leaving zeros elsewhere.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{average_heads, parallel_layer, ParallelLayer, Sharing};
use crate::error::{Error, Result};
use crate::nn::{linear, register_linear};
use crate::params::{Init, ParamStore};
use crate::tape::{Axis, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMethod {
    Attentional,
    /// Scores from a learned projection vector.
    Gpool,
    Random,
}

/// Selection made by one pooling step.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingRecord {
    /// Kept rows, ordered by descending score (ties: lower index first).
    pub idx: Vec<usize>,
    /// Score of every pre-pool row.
    pub scores: Vec<f64>,
    pub k: usize,
    pub n_prev: usize,
}

/// Points kept when pooling `n`.
pub fn pooled_count(n: usize) -> usize {
    n.div_ceil(2)
}

/// Indices of the `k` largest scores, stable on ties.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > scores.len() {
        return Err(Error::contract(format!("cannot keep {k} of {} points", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    Ok(order)
}

fn gate_selected(tape: &mut Tape, x: Var, scores_col: Var, idx: &[usize], proj: &str, store: &ParamStore) -> Result<Var> {
    let selected = tape.gather_rows(x, idx)?;
    let projected = linear(tape, store, proj, selected)?;
    let s = tape.gather_rows(scores_col, idx)?;
    let g = tape.sigmoid(s)?;
    tape.mul_col(projected, g)
}

/// Pooling driven by a row-stochastic `N×N` self-attention map.
pub fn attentional_pool(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    self_map: Var,
    k: usize,
    proj: &str,
) -> Result<(Var, PoolingRecord)> {
    let n = tape.shape(x).0;
    if tape.shape(self_map) != (n, n) {
        return Err(Error::dim("attentional_pool", format!("{n} points, map {:?}", tape.shape(self_map))));
    }
    let col_sums = tape.reduce_sum(self_map, Axis::Rows)?;
    let scores = tape.value(col_sums).to_vec();
    let idx = top_k(&scores, k)?;
    let scores_col = tape.transpose(col_sums)?;
    let out = gate_selected(tape, x, scores_col, &idx, proj, store)?;
    Ok((
        out,
        PoolingRecord {
            idx,
            scores,
            k,
            n_prev: n,
        },
    ))
}

/// Pooling with scores `x·w / ‖w‖` from the `D×1` vector `score_param`.
pub fn gpool(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    score_param: &str,
    k: usize,
    proj: &str,
) -> Result<(Var, PoolingRecord)> {
    let n = tape.shape(x).0;
    let w = tape.param(score_param, store.get(score_param)?)?;
    let sq = tape.mul(w, w)?;
    let norm2 = tape.sum_all(sq)?;
    let inv_norm = tape.powf(norm2, -0.5)?;
    let raw = tape.matmul(x, w)?;
    let scores_col = tape.scale_by(raw, inv_norm)?;
    let scores = tape.value(scores_col).to_vec();
    let idx = top_k(&scores, k)?;
    let out = gate_selected(tape, x, scores_col, &idx, proj, store)?;
    Ok((
        out,
        PoolingRecord {
            idx,
            scores,
            k,
            n_prev: n,
        },
    ))
}

/// `k` rows drawn uniformly without replacement; no gating.
pub fn random_pool(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    k: usize,
    seed: u64,
    proj: &str,
) -> Result<(Var, PoolingRecord)> {
    let n = tape.shape(x).0;
    if k < 1 || k > n {
        return Err(Error::contract(format!("cannot keep {k} of {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample(&mut rng, n, k).into_vec();
    let selected = tape.gather_rows(x, &idx)?;
    let out = linear(tape, store, proj, selected)?;
    Ok((
        out,
        PoolingRecord {
            idx,
            scores: vec![0.0; n],
            k,
            n_prev: n,
        },
    ))
}

/// Projects `k` pooled rows and scatters them back to `record.n_prev` rows.
pub fn unpool(tape: &mut Tape, store: &ParamStore, x: Var, record: &PoolingRecord, proj: &str) -> Result<Var> {
    if tape.shape(x).0 != record.k || record.idx.len() != record.k {
        return Err(Error::contract(format!(
            "unpool of {} rows with a record of k={} ({} indices)",
            tape.shape(x).0,
            record.k,
            record.idx.len()
        )));
    }
    let projected = linear(tape, store, proj, x)?;
    tape.scatter_rows(projected, &record.idx, record.n_prev)
}

/// Stage depths and widths of the encoder–decoder. An odd number `2h+1` of
/// stages: pooling follows each of the first `h` stages and unpooling
/// precedes each of the last `h`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    #[serde(default = "default_pooling")]
    pub pooling: PoolingMethod,
}

fn default_pooling() -> PoolingMethod {
    PoolingMethod::Attentional
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            depths: vec![2, 1, 2, 1, 2],
            dims: vec![256, 384, 128, 384, 256],
            pooling: PoolingMethod::Attentional,
        }
    }
}

impl StageConfig {
    pub fn levels(&self) -> usize {
        self.depths.len() / 2
    }

    pub fn total_layers(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated stage config")
    }

    /// Smallest point count that survives every pooling level.
    pub fn min_points(&self) -> usize {
        1 << self.levels()
    }

    pub fn validate(&self, input_dim: usize, heads: usize) -> Result<()> {
        let s = self.depths.len();
        if s == 0 || s % 2 == 0 || self.dims.len() != s {
            return Err(Error::config(format!(
                "need an odd number of stages with one dim each, got depths {:?} dims {:?}",
                self.depths, self.dims
            )));
        }
        if self.depths.contains(&0) {
            return Err(Error::config("every stage needs at least one layer"));
        }
        if self.dims[0] != input_dim {
            return Err(Error::config(format!("first stage width {} != descriptor dim {input_dim}", self.dims[0])));
        }
        for i in 0..s / 2 {
            if self.dims[i] != self.dims[s - 1 - i] {
                return Err(Error::config(format!(
                    "stage {} ({}) and its mirror {} ({}) differ",
                    i + 1,
                    self.dims[i],
                    s - i,
                    self.dims[s - 1 - i]
                )));
            }
        }
        for &d in &self.dims {
            if d % heads != 0 {
                return Err(Error::config(format!("stage width {d} not divisible by {heads} heads")));
            }
        }
        Ok(())
    }

    /// Point count of each stage for `n` input points.
    pub fn stage_points(&self, n: usize) -> Vec<usize> {
        let s = self.depths.len();
        let mut counts = vec![n; s];
        for i in 1..=s / 2 {
            counts[i] = pooled_count(counts[i - 1]);
        }
        for i in s / 2 + 1..s {
            counts[i] = counts[s - 1 - i];
        }
        counts
    }
}

/// The encoder–decoder with its parameter naming.
#[derive(Clone, Debug)]
pub struct GraphUNet {
    pub stages: Vec<Vec<ParallelLayer>>,
    pub config: StageConfig,
    pub seed: u64,
}

/// Per-image bookkeeping of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct UNetTrace {
    pub points_x: Vec<usize>,
    pub points_y: Vec<usize>,
    pub records_x: Vec<PoolingRecord>,
    pub records_y: Vec<PoolingRecord>,
}

impl GraphUNet {
    pub fn new(config: StageConfig, input_dim: usize, heads: usize, sharing: Sharing, seed: u64) -> Result<Self> {
        config.validate(input_dim, heads)?;
        let stages = config
            .depths
            .iter()
            .zip(&config.dims)
            .enumerate()
            .map(|(s, (&depth, &dim))| {
                (0..depth)
                    .map(|d| ParallelLayer::new(format!("stages.{s}.{d}"), dim, heads, sharing))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stages, config, seed })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let dims = &self.config.dims;
        let levels = self.config.levels();
        for (s, layers) in self.stages.iter().enumerate() {
            for layer in layers {
                layer.register(store, rng)?;
            }
            if s < levels {
                register_linear(store, rng, &format!("pool.{s}"), dims[s], dims[s + 1], Init::FanIn)?;
                if self.config.pooling == PoolingMethod::Gpool {
                    store.init(rng, format!("pool.{s}.score"), vec![dims[s], 1], Init::FanIn)?;
                }
            }
        }
        let s = dims.len();
        for i in 0..levels {
            let from = s / 2 + i;
            register_linear(store, rng, &format!("unpool.{i}"), dims[from], dims[from + 1], Init::FanIn)?;
        }
        Ok(())
    }

    fn pool(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        level: usize,
        side: u64,
        x: Var,
        self_maps: &[Var],
    ) -> Result<(Var, PoolingRecord)> {
        let n = tape.shape(x).0;
        let k = pooled_count(n);
        let proj = format!("pool.{level}");
        match self.config.pooling {
            PoolingMethod::Attentional => {
                let map = average_heads(tape, self_maps)?;
                attentional_pool(tape, store, x, map, k, &proj)
            }
            PoolingMethod::Gpool => gpool(tape, store, x, &format!("pool.{level}.score"), k, &proj),
            PoolingMethod::Random => {
                let seed = self.seed ^ (level as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ side;
                random_pool(tape, store, x, k, seed, &proj)
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var, mut y: Var) -> Result<(Var, Var, UNetTrace)> {
        let (m, n) = (tape.shape(x).0, tape.shape(y).0);
        let min = self.config.min_points();
        if m < min || n < min {
            return Err(Error::contract(format!(
                "{} pooling levels need at least {min} points per image, got {m} and {n}",
                self.config.levels()
            )));
        }
        let levels = self.config.levels();
        let mut trace = UNetTrace::default();
        let mut skips = Vec::with_capacity(levels);
        for (s, layers) in self.stages.iter().enumerate() {
            if s > levels {
                let i = s - levels - 1;
                let rx = &trace.records_x[levels - 1 - i];
                let ry = &trace.records_y[levels - 1 - i];
                let ux = unpool(tape, store, x, rx, &format!("unpool.{i}"))?;
                let uy = unpool(tape, store, y, ry, &format!("unpool.{i}"))?;
                let (sx, sy) = skips.pop().expect("one skip per level");
                x = tape.add(ux, sx)?;
                y = tape.add(uy, sy)?;
            }
            trace.points_x.push(tape.shape(x).0);
            trace.points_y.push(tape.shape(y).0);
            let mut last = None;
            for layer in layers {
                let out = parallel_layer(tape, store, layer, x, y)?;
                x = out.x;
                y = out.y;
                last = Some(out.heads);
            }
            if s < levels {
                let heads = last.expect("stage has layers");
                skips.push((x, y));
                let (px, rx) = self.pool(tape, store, s, 0, x, &heads.self_x)?;
                let (py, ry) = self.pool(tape, store, s, 1, y, &heads.self_y)?;
                trace.records_x.push(rx);
                trace.records_y.push(ry);
                x = px;
                y = py;
            }
        }
        Ok((x, y, trace))
    }
}
