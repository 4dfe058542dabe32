//! Closed-form operation counts of a forward pass.
//!
//! A matmul of `m×k` by `k×n` costs `2·m·k·n`. Softmax costs
//! [`SOFTMAX_OPS`] per entry and Sinkhorn [`SINKHORN_OPS`] per augmented
//! entry per iteration. Bias adds, ReLUs, residual adds, head averaging,
//! column sums and gating are not counted. Every matmul term mirrors one
//! matmul recorded by the model on a tape, so [`FlopsBreakdown::matmul_total`]
//! equals the tape's own counter.

use serde::{Deserialize, Serialize};

use crate::attention::Sharing;
use crate::model::{ModelConfig, PositionEncoding, Variant};
use crate::unet::PoolingMethod;
use crate::wave_pe::MLP_PE_HIDDEN;

/// max-subtract, exp, sum, divide, scale.
pub const SOFTMAX_OPS: u64 = 5;
/// Two half-iterations, each an add, exp and accumulate per entry.
pub const SINKHORN_OPS: u64 = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub pe: u64,
    /// Q/K/V and head-merging projections.
    pub projections: u64,
    pub attention_logits: u64,
    pub attention_values: u64,
    pub softmax: u64,
    /// Fusion MLPs of parallel layers, message MLPs of serial layers.
    pub fusion: u64,
    /// Pooling score and projection matmuls plus unpooling projections.
    pub pooling: u64,
    /// Final projection and score matrix.
    pub matching: u64,
    pub sinkhorn: u64,
    pub total: u64,
    /// Sequential attention rounds.
    pub attention_rounds: u64,
}

impl FlopsBreakdown {
    fn add(&mut self, o: &FlopsBreakdown) {
        self.pe += o.pe;
        self.projections += o.projections;
        self.attention_logits += o.attention_logits;
        self.attention_values += o.attention_values;
        self.softmax += o.softmax;
        self.fusion += o.fusion;
        self.pooling += o.pooling;
        self.matching += o.matching;
        self.sinkhorn += o.sinkhorn;
        self.attention_rounds += o.attention_rounds;
    }

    fn finish(mut self) -> Self {
        self.total = self.pe
            + self.projections
            + self.attention_logits
            + self.attention_values
            + self.softmax
            + self.fusion
            + self.pooling
            + self.matching
            + self.sinkhorn;
        self
    }

    /// Everything except softmax and Sinkhorn.
    pub fn matmul_total(&self) -> u64 {
        self.total - self.softmax - self.sinkhorn
    }

    /// Component names and values in display order.
    pub fn components(&self) -> [(&'static str, u64); 10] {
        [
            ("pe", self.pe),
            ("projections", self.projections),
            ("attention_logits", self.attention_logits),
            ("attention_values", self.attention_values),
            ("softmax", self.softmax),
            ("fusion", self.fusion),
            ("pooling", self.pooling),
            ("matching", self.matching),
            ("sinkhorn", self.sinkhorn),
            ("total", self.total),
        ]
    }
}

fn u(v: usize) -> u64 {
    v as u64
}

fn linear(rows: usize, din: usize, dout: usize) -> u64 {
    2 * u(rows) * u(din) * u(dout)
}

fn mlp(rows: usize, dims: &[usize]) -> u64 {
    dims.windows(2).map(|w| linear(rows, w[0], w[1])).sum()
}

fn encoder(pe: PositionEncoding, c: usize, n: usize) -> u64 {
    match pe {
        PositionEncoding::Wave => mlp(n, &[c, c, c]) + mlp(n, &[3, c, c]) + mlp(n, &[2 * c, 2 * c, c]),
        PositionEncoding::Mlp => {
            let mut dims = vec![3];
            dims.extend(MLP_PE_HIDDEN);
            dims.push(c);
            mlp(n, &dims)
        }
        PositionEncoding::None => 0,
    }
}

/// One parallel layer over `m` and `n` points of width `c`.
pub fn parallel_layer(m: usize, n: usize, c: usize, heads: usize, sharing: &Sharing) -> FlopsBreakdown {
    let (m64, n64, c64) = (u(m), u(n), u(c));
    let qkv_sets = if sharing.qkv { 1 } else { 2 };
    let cross_logit_products = if sharing.attn_weights { 1 } else { 2 };
    FlopsBreakdown {
        projections: qkv_sets * 3 * (linear(m, c, c) + linear(n, c, c)) + 2 * (linear(m, c, c) + linear(n, c, c)),
        attention_logits: 2 * c64 * (m64 * m64 + n64 * n64) + cross_logit_products * 2 * m64 * n64 * c64,
        attention_values: 2 * c64 * (m64 * m64 + n64 * n64) + 4 * m64 * n64 * c64,
        softmax: SOFTMAX_OPS * u(heads) * (m64 * m64 + n64 * n64 + 2 * m64 * n64),
        fusion: mlp(m, &[2 * c, 2 * c, c]) + mlp(n, &[2 * c, 2 * c, c]),
        attention_rounds: 1,
        ..Default::default()
    }
    .finish()
}

/// One serial layer; `cross` selects the source image.
pub fn serial_layer(m: usize, n: usize, c: usize, heads: usize, cross: bool) -> FlopsBreakdown {
    let (sx, sy) = if cross { (n, m) } else { (m, n) };
    let side = |q: usize, s: usize| -> FlopsBreakdown {
        FlopsBreakdown {
            projections: linear(q, c, c) + 2 * linear(s, c, c) + linear(q, c, c),
            attention_logits: 2 * u(q) * u(s) * u(c),
            attention_values: 2 * u(q) * u(s) * u(c),
            softmax: SOFTMAX_OPS * u(heads) * u(q) * u(s),
            fusion: mlp(q, &[2 * c, 2 * c, c]),
            ..Default::default()
        }
    };
    let mut out = side(m, sx);
    out.add(&side(n, sy));
    out.attention_rounds = 1;
    out.finish()
}

/// Counts for `cfg` on images with `m` and `n` keypoints. Zero keypoints in
/// either image count as an empty pass.
pub fn count_flops(cfg: &ModelConfig, m: usize, n: usize) -> FlopsBreakdown {
    if m == 0 || n == 0 {
        return FlopsBreakdown::default();
    }
    let c = cfg.descriptor_dim;
    let mut out = FlopsBreakdown {
        pe: encoder(cfg.pe, c, m) + encoder(cfg.pe, c, n),
        matching: linear(m, c, c) + linear(n, c, c) + 2 * u(m) * u(n) * u(c),
        sinkhorn: SINKHORN_OPS * u(m + 1) * u(n + 1) * u(cfg.sinkhorn_iterations),
        ..Default::default()
    };
    match cfg.variant {
        Variant::Paraformer => {
            for _ in 0..cfg.layers {
                out.add(&parallel_layer(m, n, c, cfg.heads, &cfg.sharing));
            }
        }
        Variant::SerialBaseline => {
            for _ in 0..cfg.layers {
                out.add(&serial_layer(m, n, c, cfg.heads, false));
                out.add(&serial_layer(m, n, c, cfg.heads, true));
            }
        }
        Variant::ParaformerU => {
            let st = &cfg.unet;
            let pm = st.stage_points(m);
            let pn = st.stage_points(n);
            let levels = st.levels();
            for (s, (&depth, &dim)) in st.depths.iter().zip(&st.dims).enumerate() {
                for _ in 0..depth {
                    out.add(&parallel_layer(pm[s], pn[s], dim, cfg.heads, &cfg.sharing));
                }
                if s < levels {
                    let next = st.dims[s + 1];
                    out.pooling += linear(pm[s + 1], dim, next) + linear(pn[s + 1], dim, next);
                    if st.pooling == PoolingMethod::Gpool {
                        out.pooling += linear(pm[s], dim, 1) + linear(pn[s], dim, 1);
                    }
                }
                if s > levels {
                    let prev = st.dims[s - 1];
                    out.pooling += linear(pm[s - 1], prev, dim) + linear(pn[s - 1], prev, dim);
                }
            }
        }
    }
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_costs_nothing() {
        for cfg in [ModelConfig::paraformer(), ModelConfig::paraformer_u(), ModelConfig::serial_baseline()] {
            assert_eq!(count_flops(&cfg, 0, 0).total, 0);
        }
    }

    #[test]
    fn total_is_sum_of_components() {
        let f = count_flops(&ModelConfig::paraformer_u(), 300, 200);
        let sum: u64 = f.components()[..9].iter().map(|(_, v)| v).sum();
        assert_eq!(sum, f.total);
    }

    #[test]
    fn attention_weight_sharing_removes_one_logit_product() {
        let on = Sharing::default();
        let off = Sharing {
            attn_weights: false,
            ..on
        };
        for (m, n, c) in [(1, 1, 4), (7, 3, 8), (100, 50, 64)] {
            let a = parallel_layer(m, n, c, 4, &on);
            let b = parallel_layer(m, n, c, 4, &off);
            assert_eq!(b.total - a.total, 2 * (m * n * c) as u64);
        }
    }

    #[test]
    fn serial_pair_takes_two_rounds() {
        let mut cfg = ModelConfig::serial_baseline();
        cfg.layers = 3;
        assert_eq!(count_flops(&cfg, 10, 10).attention_rounds, 6);
        cfg.variant = Variant::Paraformer;
        assert_eq!(count_flops(&cfg, 10, 10).attention_rounds, 3);
    }
}
