//! Dense `f64` kernels used by the tape.
//!
//! Two summation regimes exist. Contractions over feature channels go through
//! a blocked GEMM: each output element is computed by the same instruction
//! sequence regardless of its row or column, so permuting keypoints permutes
//! the result exactly. Reductions that run *over keypoints* (attention-value
//! products, softmax normalizers, column sums, Sinkhorn log-sum-exp) use
//! [`OrderFreeSum`], whose result depends only on the multiset of terms.

/// `c = a · b` (or `c += a · b` when `accumulate`), with explicit strides so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Smallest `e` with `2^e >= x` for positive finite `x`.
fn ceil_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp == 0 {
        return -1022;
    }
    let e = exp - 1023;
    if bits & ((1u64 << 52) - 1) == 0 {
        e
    } else {
        e + 1
    }
}

fn pow2(e: i32) -> f64 {
    f64::from_bits(((e.clamp(-1022, 1023) + 1023) as u64) << 52)
}

/// Two-level pre-rounding accumulator.
///
/// Every term is split against a fixed binary grid derived from an a-priori
/// bound on `|term|` and the term count; both grid sums are exact in `f64`, so
/// the result is independent of summation order. Accuracy is about `2^-100`
/// relative to `bound`.
#[derive(Clone, Copy, Debug)]
pub struct OrderFreeSum {
    s1: f64,
    s2: f64,
    hi: f64,
    lo: f64,
}

impl OrderFreeSum {
    pub fn new(bound: f64, count: usize) -> Self {
        if !(bound > 0.0) || count == 0 {
            return Self {
                s1: 0.0,
                s2: 0.0,
                hi: 0.0,
                lo: 0.0,
            };
        }
        let spread = ceil_log2(2.0 * count as f64);
        let e1 = ceil_log2(bound) + spread;
        let e2 = e1 - 53 + spread;
        let s2 = if e2 > -1000 { 1.5 * pow2(e2) } else { 0.0 };
        Self {
            s1: 1.5 * pow2(e1),
            s2,
            hi: 0.0,
            lo: 0.0,
        }
    }

    #[inline(always)]
    pub fn add(&mut self, x: f64) {
        let q1 = (x + self.s1) - self.s1;
        let r = x - q1;
        let q2 = (r + self.s2) - self.s2;
        self.hi += q1;
        self.lo += q2;
    }

    pub fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

/// Order-independent sum of a slice.
pub fn order_free_sum(xs: &[f64]) -> f64 {
    let bound = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut acc = OrderFreeSum::new(bound, xs.len());
    for &x in xs {
        acc.add(x);
    }
    acc.value()
}

/// `a (m×k) · b (k×n)` where every output element is an order-free sum over
/// `k`. Used when `k` indexes keypoints.
pub fn matmul_order_free(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let mut col_max = vec![0.0f64; n];
    for row in b.chunks_exact(n) {
        for (cm, v) in col_max.iter_mut().zip(row) {
            *cm = cm.max(v.abs());
        }
    }
    let mut s1 = vec![0.0; n];
    let mut s2 = vec![0.0; n];
    let mut hi = vec![0.0; n];
    let mut lo = vec![0.0; n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let row_max = arow.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for j in 0..n {
            let acc = OrderFreeSum::new(row_max * col_max[j], k);
            s1[j] = acc.s1;
            s2[j] = acc.s2;
        }
        hi.fill(0.0);
        lo.fill(0.0);
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                let t = av * brow[j];
                let q1 = (t + s1[j]) - s1[j];
                let r = t - q1;
                let q2 = (r + s2[j]) - s2[j];
                hi[j] += q1;
                lo[j] += q2;
            }
        }
        for j in 0..n {
            out[i * n + j] = hi[j] + lo[j];
        }
    }
    out
}

/// Per-row `Σ_j a_ij·x_j`, order-free over `j`, and the largest `|a_ij·x_j|`
/// of each row.
pub fn weighted_row_sums(rows: usize, cols: usize, a: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut sums = vec![0.0; rows];
    let mut maxes = vec![0.0; rows];
    let mut terms = vec![0.0; cols];
    for i in 0..rows {
        let arow = &a[i * cols..(i + 1) * cols];
        let mut mx = 0.0f64;
        for ((t, &av), &xv) in terms.iter_mut().zip(arow).zip(x) {
            *t = av * xv;
            mx = mx.max(t.abs());
        }
        let mut acc = OrderFreeSum::new(mx, cols);
        for &t in &terms {
            acc.add(t);
        }
        sums[i] = acc.value();
        maxes[i] = mx;
    }
    (sums, maxes)
}

/// Per-column `Σ_i a_ij·x_i`, order-free over `i`, and the largest
/// `|a_ij·x_i|` of each column.
pub fn weighted_col_sums(rows: usize, cols: usize, a: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut maxes = vec![0.0f64; cols];
    for (arow, &xv) in a.chunks_exact(cols).zip(x) {
        for (mx, &av) in maxes.iter_mut().zip(arow) {
            *mx = mx.max((av * xv).abs());
        }
    }
    let grids: Vec<OrderFreeSum> = maxes.iter().map(|&mx| OrderFreeSum::new(mx, rows)).collect();
    let s1: Vec<f64> = grids.iter().map(|g| g.s1).collect();
    let s2: Vec<f64> = grids.iter().map(|g| g.s2).collect();
    let mut hi = vec![0.0; cols];
    let mut lo = vec![0.0; cols];
    for (arow, &xv) in a.chunks_exact(cols).zip(x) {
        for j in 0..cols {
            let t = arow[j] * xv;
            let q1 = (t + s1[j]) - s1[j];
            let r = t - q1;
            let q2 = (r + s2[j]) - s2[j];
            hi[j] += q1;
            lo[j] += q2;
        }
    }
    let sums = hi.iter().zip(&lo).map(|(h, l)| h + l).collect();
    (sums, maxes)
}
