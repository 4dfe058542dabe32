//! Log-domain Sinkhorn normalization over a dustbin-augmented score matrix.
//!
//! For `m×n` scores the augmented matrix `z` is `(m+1)×(n+1)`; the last row
//! and column hold the dustbin score. Row marginals are `(1, …, 1, n)` and
//! column marginals `(1, …, 1, m)`, so the total transported mass is `m + n`.
//! Each iteration updates the row potentials `u` and then the column
//! potentials `v`:
//!
//! ```text
//! u_i = log a_i − logsumexp_j(z_ij + v_j)
//! v_j = log b_j − logsumexp_i(z_ij + u_i)
//! ```
//!
//! The potentials of every iteration are kept so the unrolled iterations can
//! be differentiated exactly without recording them as individual ops.

use crate::error::{Error, Result};
use crate::kernels::{weighted_col_sums, weighted_row_sums, OrderFreeSum};

/// Potentials after each iteration, oldest first.
#[derive(Clone, Debug, Default)]
pub struct SinkhornTrace {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl SinkhornTrace {
    pub fn iterations(&self) -> usize {
        self.u.len()
    }

    /// `log P = z + u + v` for the final potentials.
    pub fn log_assignment(&self, z: &[f64], m: usize, n: usize) -> Vec<f64> {
        let u = self.u.last().expect("at least one iteration");
        let v = self.v.last().expect("at least one iteration");
        let mut out = z.to_vec();
        for i in 0..=m {
            for j in 0..=n {
                out[i * (n + 1) + j] += u[i] + v[j];
            }
        }
        out
    }
}

/// Scores with a dustbin row and column filled with `alpha`.
pub fn augment(scores: &[f64], m: usize, n: usize, alpha: f64) -> Vec<f64> {
    let mut z = vec![alpha; (m + 1) * (n + 1)];
    for i in 0..m {
        z[i * (n + 1)..i * (n + 1) + n].copy_from_slice(&scores[i * n..(i + 1) * n]);
    }
    z
}

pub fn log_marginals(m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rows = vec![0.0; m + 1];
    rows[m] = (n as f64).ln();
    let mut cols = vec![0.0; n + 1];
    cols[n] = (m as f64).ln();
    (rows, cols)
}

/// Order-free log-sum-exp.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = OrderFreeSum::new(1.0, xs.len());
    for &x in xs {
        acc.add((x - max).exp());
    }
    max + acc.value().ln()
}

/// Smallest trusted largest-term of a factored sum; below it the row or
/// column is recomputed entry by entry.
const MIN_FACTORED_TERM: f64 = 1e-200;
/// Largest exponent of a factored scale before the exact path is used.
const MAX_FACTORED_EXPONENT: f64 = 600.0;

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `exp(z − max)` stabilized per row and per column, so each log-sum-exp of
/// an iteration reduces to a weighted sum of precomputed kernels and only
/// `O(m + n)` exponentials per iteration.
struct Kernels {
    rows: usize,
    cols: usize,
    row_max: Vec<f64>,
    col_max: Vec<f64>,
    by_row: Vec<f64>,
    by_col: Vec<f64>,
}

impl Kernels {
    fn new(z: &[f64], rows: usize, cols: usize) -> Self {
        let row_max: Vec<f64> = z.chunks_exact(cols).map(max_of).collect();
        let mut col_max = vec![f64::NEG_INFINITY; cols];
        for row in z.chunks_exact(cols) {
            for (c, &x) in col_max.iter_mut().zip(row) {
                *c = c.max(x);
            }
        }
        let mut by_row = vec![0.0; rows * cols];
        let mut by_col = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let x = z[i * cols + j];
                by_row[i * cols + j] = (x - row_max[i]).exp();
                by_col[i * cols + j] = (x - col_max[j]).exp();
            }
        }
        Self {
            rows,
            cols,
            row_max,
            col_max,
            by_row,
            by_col,
        }
    }

    /// `lse_j(z_ij + v_j)` for every row `i`.
    fn row_lse(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let vmax = max_of(v);
        let ev: Vec<f64> = v.iter().map(|&x| (x - vmax).exp()).collect();
        let (sums, maxes) = weighted_row_sums(self.rows, self.cols, &self.by_row, &ev);
        (0..self.rows)
            .map(|i| {
                if maxes[i] >= MIN_FACTORED_TERM {
                    self.row_max[i] + vmax + sums[i].ln()
                } else {
                    let row = &z[i * self.cols..(i + 1) * self.cols];
                    log_sum_exp(&row.iter().zip(v).map(|(a, b)| a + b).collect::<Vec<_>>())
                }
            })
            .collect()
    }

    /// `lse_i(z_ij + u_i)` for every column `j`.
    fn col_lse(&self, z: &[f64], u: &[f64]) -> Vec<f64> {
        let umax = max_of(u);
        let eu: Vec<f64> = u.iter().map(|&x| (x - umax).exp()).collect();
        let (sums, maxes) = weighted_col_sums(self.rows, self.cols, &self.by_col, &eu);
        (0..self.cols)
            .map(|j| {
                if maxes[j] >= MIN_FACTORED_TERM {
                    self.col_max[j] + umax + sums[j].ln()
                } else {
                    let col: Vec<f64> = (0..self.rows).map(|i| z[i * self.cols + j] + u[i]).collect();
                    log_sum_exp(&col)
                }
            })
            .collect()
    }
}

pub fn log_sinkhorn(z: &[f64], m: usize, n: usize, iterations: usize) -> Result<SinkhornTrace> {
    if m == 0 || n == 0 {
        return Err(Error::EmptyInput(format!("sinkhorn on a {m}x{n} score matrix")));
    }
    if iterations == 0 {
        return Err(Error::contract("sinkhorn needs at least one iteration"));
    }
    if z.len() != (m + 1) * (n + 1) {
        return Err(Error::dim("sinkhorn", format!("augmented matrix has {} entries", z.len())));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("sinkhorn scores must be finite".into()));
    }
    let (log_a, log_b) = log_marginals(m, n);
    let (rows, cols) = (m + 1, n + 1);
    let k = Kernels::new(z, rows, cols);
    let mut v = vec![0.0; cols];
    let mut trace = SinkhornTrace {
        u: Vec::with_capacity(iterations),
        v: Vec::with_capacity(iterations),
    };
    for _ in 0..iterations {
        let u: Vec<f64> = k.row_lse(z, &v).iter().zip(&log_a).map(|(l, a)| a - l).collect();
        v = k.col_lse(z, &u).iter().zip(&log_b).map(|(l, b)| b - l).collect();
        if let Some(bad) = u.iter().chain(&v).find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("sinkhorn potential became {bad}")));
        }
        trace.u.push(u);
        trace.v.push(v.clone());
    }
    Ok(trace)
}

/// Gradient with respect to `z` given the gradient `g` of the
/// log-assignment, by reverse iteration through the recorded potentials.
///
/// The weights `exp(z_ij + u_i + v_j − log b_j)` (column softmax of the
/// v-update) and `exp(z_ij + v'_j + u_i − log a_i)` (row softmax of the
/// u-update) are formed as kernel × per-row factor × per-column factor.
pub fn log_sinkhorn_backward(z: &[f64], m: usize, n: usize, trace: &SinkhornTrace, g: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m + 1, n + 1);
    let (log_a, log_b) = log_marginals(m, n);
    let k = Kernels::new(z, rows, cols);
    let mut gz = g.to_vec();
    let mut gu = vec![0.0; rows];
    let mut gv = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            gu[i] += g[i * cols + j];
            gv[j] += g[i * cols + j];
        }
    }
    let zero = vec![0.0; cols];
    let mut row_scale = vec![0.0; rows];
    let mut col_scale = vec![0.0; cols];
    for t in (0..trace.iterations()).rev() {
        let u = &trace.u[t];
        let v = &trace.v[t];
        let v_prev = if t == 0 { &zero } else { &trace.v[t - 1] };

        // Column weights w_ij = by_col_ij · e^{u_i − umax} · e^{col_max_j + umax + v_j − log b_j}.
        let umax = max_of(u);
        for (s, &ui) in row_scale.iter_mut().zip(u) {
            *s = (ui - umax).exp();
        }
        let mut exact_cols = Vec::new();
        for j in 0..cols {
            let e = k.col_max[j] + umax + v[j] - log_b[j];
            if e > MAX_FACTORED_EXPONENT {
                exact_cols.push(j);
                col_scale[j] = 0.0;
            } else {
                col_scale[j] = e.exp() * gv[j];
            }
        }
        for i in 0..rows {
            let krow = &k.by_col[i * cols..(i + 1) * cols];
            let grow = &mut gz[i * cols..(i + 1) * cols];
            let ri = row_scale[i];
            let mut acc = 0.0;
            for j in 0..cols {
                let wg = krow[j] * ri * col_scale[j];
                grow[j] -= wg;
                acc += wg;
            }
            gu[i] -= acc;
        }
        for &j in &exact_cols {
            for i in 0..rows {
                let wg = (z[i * cols + j] + u[i] + v[j] - log_b[j]).exp() * gv[j];
                gz[i * cols + j] -= wg;
                gu[i] -= wg;
            }
        }

        // Row weights r_ij = by_row_ij · e^{v'_j − vmax} · e^{row_max_i + vmax + u_i − log a_i}.
        let vmax = max_of(v_prev);
        for (s, &vj) in col_scale.iter_mut().zip(v_prev) {
            *s = (vj - vmax).exp();
        }
        let mut gv_prev = vec![0.0; cols];
        for i in 0..rows {
            let e = k.row_max[i] + vmax + u[i] - log_a[i];
            let krow = &k.by_row[i * cols..(i + 1) * cols];
            let grow = &mut gz[i * cols..(i + 1) * cols];
            if e > MAX_FACTORED_EXPONENT {
                for j in 0..cols {
                    let rg = (z[i * cols + j] + v_prev[j] + u[i] - log_a[i]).exp() * gu[i];
                    grow[j] -= rg;
                    gv_prev[j] -= rg;
                }
            } else {
                let ri = e.exp() * gu[i];
                for j in 0..cols {
                    let rg = krow[j] * col_scale[j] * ri;
                    grow[j] -= rg;
                    gv_prev[j] -= rg;
                }
            }
        }
        gv = gv_prev;
        gu.fill(0.0);
    }
    gz
}

