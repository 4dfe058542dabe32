//! Reverse-mode differentiation over 2-D `f64` values.
//!
//! A [`Tape`] is an arena: every op appends one node holding its output value
//! and the handles of its inputs, so insertion order is a topological order.
//! [`Tape::backward`] walks the arena once in reverse.
//!
//! Index selection (`gather_rows`, `scatter_rows`, `select_entries`) treats
//! its indices as constants; gradients flow through the selected values only.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels::{gemm, matmul_order_free, order_free_sum, OrderFreeSum};
use crate::matcher::sinkhorn::{self, SinkhornTrace};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows: `m×n -> 1×n`.
    Rows,
    /// Collapse columns: `m×n -> m×1`.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulOrderFree(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Powf(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    SoftmaxRows(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    ReduceSum(Var, Axis),
    SumAll(Var),
    SelectEntries(Var, Vec<(usize, usize)>),
    Sinkhorn {
        scores: Var,
        alpha: Var,
        trace: SinkhornTrace,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded op recorder. Independent tapes share nothing and may run
/// on separate threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    matmul_flops: u64,
    branch_signature: u64,
}

fn transpose(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total `2·m·k·n` over every matmul recorded so far.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        let mut t = Tensor::new(
            vec![n.rows, n.cols],
            n.value.iter().map(|&x| x as f32).collect(),
        )
        .expect("tape values are finite and shaped");
        t.set_requires_grad(false);
        t
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, op_name: &str) -> Result<Var> {
        debug_assert_eq!(value.len(), rows * cols);
        if let Some(pos) = value.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{op_name} produced {} at entry {pos}",
                value[pos]
            )));
        }
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::MatMulOrderFree(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::ScaleBy(a, b) => ng(a) || ng(b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Powf(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::SoftmaxRows(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _)
            | Op::ReduceSum(a, _)
            | Op::SumAll(a)
            | Op::SelectEntries(a, _) => ng(a),
            Op::ConcatCols(vs) => vs.iter().any(ng),
            Op::Sinkhorn { scores, alpha, .. } => ng(scores) || ng(alpha),
        }
    }

    fn leaf_from(&mut self, t: &Tensor, needs_grad: bool) -> Result<Var> {
        let value = t.data().iter().map(|&x| x as f64).collect();
        let v = self.push(t.rows(), t.cols(), value, Op::Leaf, "leaf")?;
        self.nodes[v.0].needs_grad = needs_grad;
        Ok(v)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf_from(t, false)
    }

    pub fn constant_raw(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(Error::dim("constant", format!("{rows}x{cols} vs {}", value.len())));
        }
        self.push(rows, cols, value, Op::Leaf, "constant")
    }

    /// An `f64` leaf; `requires_grad` decides whether it collects a gradient.
    pub fn leaf_raw(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let v = self.constant_raw(rows, cols, value)?;
        self.nodes[v.0].needs_grad = requires_grad;
        Ok(v)
    }

    /// A differentiable leaf, honouring the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf_from(t, t.requires_grad())
    }

    /// Registers a named parameter once; later calls with the same name reuse
    /// the node so shared weights accumulate a single gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.leaf(t)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out, false);
        self.matmul_flops += 2 * (m * k * n) as u64;
        self.push(m, n, out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (1, k), &mut out, false);
        self.matmul_flops += 2 * (m * k * n) as u64;
        self.push(m, n, out, Op::MatMulNt(a, b), "matmul_nt")
    }

    /// Matmul whose inner sums are order-free; use when the contracted axis
    /// indexes keypoints (attention weights times values).
    pub fn matmul_order_free(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul_order_free", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul_order_free(m, k, n, self.value(a), self.value(b));
        self.matmul_flops += 2 * (m * k * n) as u64;
        self.push(m, n, out, Op::MatMulOrderFree(a, b), "matmul_order_free")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let out = transpose(m, n, self.value(a));
        self.push(n, m, out, Op::Transpose(a), "transpose")
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (m, n) = self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(m, n, out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `a + 1·row`: adds a `1×n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(Error::dim("add_row", format!("{m}x{n} + {:?}", self.shape(row))));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks_exact(n.max(1))
            .flat_map(|ar| ar.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        self.push(m, n, out, Op::AddRow(a, row), "add_row")
    }

    /// Scales row `i` of `a` by `col[i]` for an `m×1` column vector.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(col) != (m, 1) {
            return Err(Error::dim("mul_col", format!("{m}x{n} ⊙ {:?}", self.shape(col))));
        }
        let c = self.value(col);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            for x in &mut out[i * n..(i + 1) * n] {
                *x *= c[i];
            }
        }
        self.push(m, n, out, Op::MulCol(a, col), "mul_col")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(m, n, out, Op::Scale(a, s), "scale")
    }

    /// Multiplies every entry of `a` by the `1×1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::dim("scale_by", format!("factor is {:?}", self.shape(s))));
        }
        let (m, n) = self.shape(a);
        let f = self.scalar(s);
        let out = self.value(a).iter().map(|x| x * f).collect();
        self.push(m, n, out, Op::ScaleBy(a, s), "scale_by")
    }

    /// Elementwise `a^p`; non-integer `p` requires positive entries.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 && self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::contract("powf with fractional exponent on a non-positive entry"));
        }
        self.map(a, Op::Powf(a, p), "powf", |x| x.powf(p))
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(m, n, out, op, name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    /// FNV-style fold of discrete choices into the branch signature.
    fn fold_signature(&mut self, items: impl Iterator<Item = u64>) {
        let mut h = self.branch_signature ^ 0xcbf2_9ce4_8422_2325;
        for x in items {
            h = (h ^ x).wrapping_mul(0x0100_0000_01b3);
        }
        self.branch_signature = h;
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let pattern: Vec<u64> = self.value(a).iter().map(|&x| u64::from(x > 0.0)).collect();
        self.fold_signature(pattern.into_iter());
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    /// Hash of every ReLU activation pattern and row selection recorded so
    /// far. Finite-difference checks compare it between perturbed runs to
    /// detect perturbations that cross a kink or change a selection.
    pub fn branch_signature(&self) -> u64 {
        self.branch_signature
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sin(a), "sin", f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Cos(a), "cos", f64::cos)
    }

    /// Row-wise `softmax(scale · a)` with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var, scale: f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m * n];
        for (orow, arow) in out.chunks_exact_mut(n.max(1)).zip(self.value(a).chunks_exact(n.max(1))) {
            let max = arow.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(scale * x));
            let mut acc = OrderFreeSum::new(1.0, n);
            for (o, &x) in orow.iter_mut().zip(arow) {
                *o = (scale * x - max).exp();
                acc.add(*o);
            }
            let z = acc.value();
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        self.push(m, n, out, Op::SoftmaxRows(a, scale), "softmax_rows")
    }

    // ---- structural ----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "no inputs"));
        };
        let m = self.shape(first).0;
        if let Some(bad) = parts.iter().find(|&&p| self.shape(p).0 != m) {
            return Err(Error::dim(
                "concat_cols",
                format!("row counts {m} vs {}", self.shape(*bad).0),
            ));
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        self.push(m, n, out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {n}")));
        }
        let mut out = Vec::with_capacity(m * len);
        for row in self.value(a).chunks_exact(n.max(1)) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(m, len, out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            out.extend_from_slice(&self.value(a)[i * n..(i + 1) * n]);
        }
        self.fold_signature(idx.iter().map(|&i| i as u64));
        self.push(idx.len(), n, out, Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    /// Places row `r` of `a` at row `idx[r]` of an `n_total`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_total: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if idx.len() != m {
            return Err(Error::dim("scatter_rows", format!("{} indices for {m} rows", idx.len())));
        }
        let mut seen = vec![false; n_total];
        let mut out = vec![0.0; n_total * n];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_total {
                return Err(Error::Index {
                    op: "scatter_rows",
                    index: i,
                    len: n_total,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::contract(format!("scatter_rows: index {i} appears twice")));
            }
            out[i * n..(i + 1) * n].copy_from_slice(&self.value(a)[r * n..(r + 1) * n]);
        }
        self.push(n_total, n, out, Op::ScatterRows(a, idx.to_vec()), "scatter_rows")
    }

    /// Order-free sum along one axis.
    pub fn reduce_sum(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (m, n) = self.shape(a);
        let v = self.value(a);
        let (rows, cols, out) = match axis {
            Axis::Rows => {
                let mut scratch = vec![0.0; m];
                let out = (0..n)
                    .map(|j| {
                        for i in 0..m {
                            scratch[i] = v[i * n + j];
                        }
                        order_free_sum(&scratch)
                    })
                    .collect();
                (1, n, out)
            }
            Axis::Cols => (m, 1, v.chunks_exact(n.max(1)).take(m).map(order_free_sum).collect()),
        };
        self.push(rows, cols, out, Op::ReduceSum(a, axis), "reduce_sum")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = order_free_sum(self.value(a));
        self.push(1, 1, vec![s], Op::SumAll(a), "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if m * n == 0 {
            return Err(Error::EmptyInput("mean of an empty value".into()));
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / (m * n) as f64)
    }

    /// The entries at `coords` as a `1×K` row.
    pub fn select_entries(&mut self, a: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.shape(a);
        let mut out = Vec::with_capacity(coords.len());
        for &(i, j) in coords {
            if i >= m || j >= n {
                return Err(Error::Index {
                    op: "select_entries",
                    index: i.max(j),
                    len: if i >= m { m } else { n },
                });
            }
            out.push(self.value(a)[i * n + j]);
        }
        self.push(1, coords.len(), out, Op::SelectEntries(a, coords.to_vec()), "select_entries")
    }

    /// Log-domain Sinkhorn over `scores` augmented with a dustbin row and
    /// column filled with the `1×1` value `alpha`. Returns the
    /// `(m+1)×(n+1)` log-assignment.
    pub fn sinkhorn(&mut self, scores: Var, alpha: Var, iterations: usize) -> Result<Var> {
        let (m, n) = self.shape(scores);
        if self.shape(alpha) != (1, 1) {
            return Err(Error::dim("sinkhorn", "dustbin score must be 1x1"));
        }
        let z = sinkhorn::augment(self.value(scores), m, n, self.scalar(alpha));
        let trace = sinkhorn::log_sinkhorn(&z, m, n, iterations)?;
        let out = trace.log_assignment(&z, m, n);
        self.push(m + 1, n + 1, out, Op::Sinkhorn { scores, alpha, trace }, "sinkhorn")
    }

    // ---- backward ------------------------------------------------------

    /// Populates gradients of `root` with respect to every leaf that needs
    /// one. A second call without [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::contract("backward already ran on this tape; reset_grads first"));
        }
        if self.shape(root) != (1, 1) {
            return Err(Error::contract(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    /// Gradient of a named parameter; `None` when it received none.
    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.grad(*self.params.get(name)?)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (m, n) = (node.rows, node.cols);
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let len = |v: &Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::MatMulOrderFree(a, b) => {
                let k = self.shape(*a).1;
                if needs(a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, (n, 1), self.value(*b), (1, n), ga, true);
                }
                if needs(b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    gemm(k, m, n, self.value(*a), (1, k), g, (n, 1), gb, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let k = self.shape(*a).1;
                if needs(a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, (n, 1), self.value(*b), (k, 1), ga, true);
                }
                if needs(b) {
                    let gb = accumulate(&mut grads[b.0], n * k);
                    gemm(n, m, k, g, (1, n), self.value(*a), (k, 1), gb, true);
                }
            }
            Op::Transpose(a) => {
                let ga = accumulate(&mut grads[a.0], m * n);
                for (x, y) in ga.iter_mut().zip(transpose(m, n, g)) {
                    *x += y;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(a) {
                    for (x, y) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if needs(b) {
                    for (x, y) in accumulate(&mut grads[b.0], g.len()).iter_mut().zip(g) {
                        *x += sign * y;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let bv = self.value(*b);
                    for ((x, y), w) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                }
                if needs(b) {
                    let av = self.value(*a);
                    for ((x, y), w) in accumulate(&mut grads[b.0], g.len()).iter_mut().zip(g).zip(av) {
                        *x += y * w;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(a) {
                    for (x, y) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if needs(row) {
                    let gr = accumulate(&mut grads[row.0], n);
                    for grow in g.chunks_exact(n.max(1)) {
                        for (x, y) in gr.iter_mut().zip(grow) {
                            *x += y;
                        }
                    }
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col);
                if needs(a) {
                    let ga = accumulate(&mut grads[a.0], m * n);
                    for r in 0..m {
                        for j in 0..n {
                            ga[r * n + j] += g[r * n + j] * cv[r];
                        }
                    }
                }
                if needs(col) {
                    let av = self.value(*a);
                    let gc = accumulate(&mut grads[col.0], m);
                    for r in 0..m {
                        gc[r] += (0..n).map(|j| g[r * n + j] * av[r * n + j]).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, s) => {
                for (x, y) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                    *x += s * y;
                }
            }
            Op::ScaleBy(a, s) => {
                let f = self.scalar(*s);
                if needs(a) {
                    for (x, y) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                        *x += f * y;
                    }
                }
                if needs(s) {
                    let dot: f64 = g.iter().zip(self.value(*a)).map(|(y, v)| y * v).sum();
                    accumulate(&mut grads[s.0], 1)[0] += dot;
                }
            }
            Op::Powf(a, p) => {
                let av = self.value(*a);
                let ga = accumulate(&mut grads[a.0], g.len());
                for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                    *x += y * p * v.powf(p - 1.0);
                }
            }
            Op::Sigmoid(a) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                for ((x, y), s) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x += y * s * (1.0 - s);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let ga = accumulate(&mut grads[a.0], g.len());
                for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                    if *v > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::Sin(a) | Op::Cos(a) => {
                let is_sin = matches!(node.op, Op::Sin(_));
                let av = self.value(*a);
                let ga = accumulate(&mut grads[a.0], g.len());
                for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                    *x += if is_sin { y * v.cos() } else { -y * v.sin() };
                }
            }
            Op::SoftmaxRows(a, s) => {
                let ga = accumulate(&mut grads[a.0], m * n);
                for r in 0..m {
                    let yr = &node.value[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                    for j in 0..n {
                        ga[r * n + j] += s * yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p).1;
                    if needs(p) {
                        let gp = accumulate(&mut grads[p.0], m * c);
                        for r in 0..m {
                            for j in 0..c {
                                gp[r * c + j] += g[r * n + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let an = self.shape(*a).1;
                let ga = accumulate(&mut grads[a.0], m * an);
                for r in 0..m {
                    for j in 0..n {
                        ga[r * an + start + j] += g[r * n + j];
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let ga = accumulate(&mut grads[a.0], len(a));
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga[src * n + j] += g[r * n + j];
                    }
                }
            }
            Op::ScatterRows(a, idx) => {
                let ga = accumulate(&mut grads[a.0], len(a));
                for (r, &dst) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga[r * n + j] += g[dst * n + j];
                    }
                }
            }
            Op::ReduceSum(a, axis) => {
                let (am, an) = self.shape(*a);
                let ga = accumulate(&mut grads[a.0], am * an);
                for r in 0..am {
                    for j in 0..an {
                        ga[r * an + j] += match axis {
                            Axis::Rows => g[j],
                            Axis::Cols => g[r],
                        };
                    }
                }
            }
            Op::SumAll(a) => {
                for x in accumulate(&mut grads[a.0], len(a)).iter_mut() {
                    *x += g[0];
                }
            }
            Op::SelectEntries(a, coords) => {
                let an = self.shape(*a).1;
                let ga = accumulate(&mut grads[a.0], len(a));
                for (k, &(r, c)) in coords.iter().enumerate() {
                    ga[r * an + c] += g[k];
                }
            }
            Op::Sinkhorn { scores, alpha, trace } => {
                let (sm, sn) = self.shape(*scores);
                let z = sinkhorn::augment(self.value(*scores), sm, sn, self.scalar(*alpha));
                let gz = sinkhorn::log_sinkhorn_backward(&z, sm, sn, trace, g);
                if needs(scores) {
                    let gs = accumulate(&mut grads[scores.0], sm * sn);
                    for r in 0..sm {
                        for c in 0..sn {
                            gs[r * sn + c] += gz[r * (sn + 1) + c];
                        }
                    }
                }
                if needs(alpha) {
                    let mut total = 0.0;
                    for r in 0..=sm {
                        for c in 0..=sn {
                            if r == sm || c == sn {
                                total += gz[r * (sn + 1) + c];
                            }
                        }
                    }
                    accumulate(&mut grads[alpha.0], 1)[0] += total;
                }
            }
        }
    }
}
