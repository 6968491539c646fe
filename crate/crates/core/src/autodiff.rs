//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is an `Array2<f64>`; scalars are `1 x 1`. A forward
//! pass records operations onto a [`Tape`], and [`Tape::backward`] walks the
//! tape in reverse to accumulate gradients for every node that depends on a
//! parameter. Graph message passing is expressed through [`Edges`], a list of
//! `(dst, src)` pairs, so edge weights can themselves be differentiable.
//!
//! Binary element-wise ops broadcast their right operand when it has shape
//! `(1, c)`, `(r, 1)` or `(1, 1)`.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Directed message-passing structure: edge `e` carries `src[e] -> dst[e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Edges {
    pub dst: Vec<usize>,
    pub src: Vec<usize>,
    /// Number of destination rows produced by aggregation.
    pub n_dst: usize,
}

impl Edges {
    pub fn new(dst: Vec<usize>, src: Vec<usize>, n_dst: usize) -> Self {
        assert_eq!(dst.len(), src.len(), "edge endpoint lists differ in length");
        debug_assert!(dst.iter().all(|&d| d < n_dst));
        Self { dst, src, n_dst }
    }

    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }

    /// Number of incoming edges per destination row.
    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_dst];
        for &d in &self.dst {
            deg[d] += 1;
        }
        deg
    }
}

/// Compressed sparse row matrix used as a constant left operand.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *data.last_mut().unwrap() += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            data.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self { rows, cols, indptr, indices, data }
    }

    /// Sparse view of a dense matrix, keeping nonzero entries.
    pub fn from_dense(m: &Array2<f64>) -> Self {
        let mut indptr = Vec::with_capacity(m.nrows() + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for row in m.rows() {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    data.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self { rows: m.nrows(), cols: m.ncols(), indptr, indices, data }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[[r, self.indices[k]]] += self.data[k];
            }
        }
        out
    }

    /// `self * x`.
    pub fn matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.cols, x.nrows(), "csr matmul shape mismatch");
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut orow = out.row_mut(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                orow.scaled_add(self.data[k], &x.row(self.indices[k]));
            }
        }
        out
    }

    /// `self^T * g`.
    pub fn t_matmul(&self, g: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.rows, g.nrows(), "csr transpose matmul shape mismatch");
        let mut out = Array2::zeros((self.cols, g.ncols()));
        for r in 0..self.rows {
            let grow = g.row(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.row_mut(self.indices[k]).scaled_add(self.data[k], &grow);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Rc<Csr>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Pick(Var, Rc<Vec<usize>>),
    GatherRows(Var, Rc<Vec<usize>>),
    EdgeAggregate { w: Var, x: Var, edges: Rc<Edges> },
    EdgeSoftmax(Var, Rc<Edges>),
    RowDot(Var, Var),
    RowNormalize(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not influence the loss.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.grads[v.0].take().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

fn check_broadcast(a: (usize, usize), b: (usize, usize), what: &str) {
    let ok = a == b || b == (1, 1) || (b.0 == 1 && b.1 == a.1) || (b.1 == 1 && b.0 == a.0);
    assert!(ok, "{what}: cannot broadcast {b:?} onto {a:?}");
}

/// Sum `g` down to `target` shape, undoing a broadcast.
fn reduce_to(g: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let mut out = g.clone();
    if target.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
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

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn row_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
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

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.nodes[v.0].value)
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(shape(val), (1, 1), "item() on a non-scalar node");
        val[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Constant sparse matrix times `x`.
    pub fn spmm(&mut self, m: Rc<Csr>, x: Var) -> Var {
        let value = m.matmul(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::SpMM(m, x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        check_broadcast(self.shape(a), self.shape(b), "add");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        check_broadcast(self.shape(a), self.shape(b), "sub");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        check_broadcast(self.shape(a), self.shape(b), "mul");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).mapv(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(value, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        let rg = self.rg(x);
        self.push(value, Op::Ln(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(softplus);
        let rg = self.rg(x);
        self.push(value, Op::Softplus(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).mapv(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp(x, lo, hi), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert!(!v.is_empty(), "mean of an empty node");
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Row sums, giving an `r x 1` column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(value, Op::RowSum(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = row_softmax(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Column vector of `x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let v = self.value(x);
        assert_eq!(v.nrows(), idx.len(), "pick: one index per row required");
        let value = Array2::from_shape_fn((idx.len(), 1), |(i, _)| v[[i, idx[i]]]);
        let rg = self.rg(x);
        self.push(value, Op::Pick(x, idx), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let v = self.value(x);
        let mut value = Array2::zeros((idx.len(), v.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&v.row(i));
        }
        let rg = self.rg(x);
        self.push(value, Op::GatherRows(x, idx), rg)
    }

    /// `out[dst[e]] += w[e] * x[src[e]]` with `w` an `E x 1` column.
    pub fn edge_aggregate(&mut self, w: Var, x: Var, edges: Rc<Edges>) -> Var {
        let (wv, xv) = (self.value(w), self.value(x));
        assert_eq!(shape(wv), (edges.len(), 1), "edge_aggregate: weight column shape");
        let mut value = Array2::zeros((edges.n_dst, xv.ncols()));
        for e in 0..edges.len() {
            value.row_mut(edges.dst[e]).scaled_add(wv[[e, 0]], &xv.row(edges.src[e]));
        }
        let rg = self.rg(w) || self.rg(x);
        self.push(value, Op::EdgeAggregate { w, x, edges }, rg)
    }

    /// Softmax of an `E x 1` column within each destination group.
    pub fn edge_softmax(&mut self, x: Var, edges: Rc<Edges>) -> Var {
        let xv = self.value(x);
        assert_eq!(shape(xv), (edges.len(), 1), "edge_softmax: logit column shape");
        let mut max = vec![f64::NEG_INFINITY; edges.n_dst];
        for e in 0..edges.len() {
            max[edges.dst[e]] = max[edges.dst[e]].max(xv[[e, 0]]);
        }
        let mut value = Array2::zeros((edges.len(), 1));
        let mut total = vec![0.0; edges.n_dst];
        for e in 0..edges.len() {
            let v = (xv[[e, 0]] - max[edges.dst[e]]).exp();
            value[[e, 0]] = v;
            total[edges.dst[e]] += v;
        }
        for e in 0..edges.len() {
            value[[e, 0]] /= total[edges.dst[e]];
        }
        let rg = self.rg(x);
        self.push(value, Op::EdgeSoftmax(x, edges), rg)
    }

    /// Per-row dot product, giving an `r x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "row_dot shape mismatch");
        let value = (self.value(a) * self.value(b)).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::RowDot(a, b), rg)
    }

    /// `x_i / max(||x_i||, eps)` per row: exact unit rows unless nearly zero.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n.max(eps);
        }
        let rg = self.rg(x);
        self.push(value, Op::RowNormalize(x, eps), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceCols(x, start, end), rg)
    }

    /// Mean cross-entropy of row logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<Vec<usize>>) -> Var {
        let lsm = self.log_softmax(logits);
        let picked = self.pick(lsm, labels);
        let m = self.mean(picked);
        self.scale(m, -1.0)
    }

    /// Accumulate gradients of the scalar `loss` into every upstream node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::SpMM(m, x) => acc(&mut grads, *x, m.t_matmul(&g)),
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, reduce_to(&g, self.shape(*b)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, -reduce_to(&g, self.shape(*b)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*b) {
                        acc(&mut grads, *b, reduce_to(&(&g * av), shape(bv)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * bv);
                    }
                }
                Op::Affine(x, scale) => acc(&mut grads, *x, g * *scale),
                Op::Relu(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |gv, &xv| {
                        if xv <= 0.0 {
                            *gv *= slope
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                    acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(y, |gv, &yv| *gv *= 1.0 - yv * yv);
                    acc(&mut grads, *x, gx);
                }
                Op::Exp(x) => acc(&mut grads, *x, g * y),
                Op::Ln(x) => acc(&mut grads, *x, g / self.value(*x)),
                Op::Softplus(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |gv, &xv| *gv *= sigmoid(xv));
                    acc(&mut grads, *x, gx);
                }
                Op::Square(x) => acc(&mut grads, *x, g * self.value(*x) * 2.0),
                Op::Clamp(x, lo, hi) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |gv, &xv| {
                        if xv < *lo || xv > *hi {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(self.shape(*x), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let (r, c) = self.shape(*x);
                    acc(&mut grads, *x, Array2::from_elem((r, c), g[[0, 0]] / (r * c) as f64));
                }
                Op::RowSum(x) => {
                    let gx = g.broadcast(self.shape(*x)).unwrap().to_owned();
                    acc(&mut grads, *x, gx);
                }
                Op::LogSoftmax(x) => {
                    let soft = y.mapv(f64::exp);
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, &g - &(soft * &gsum));
                }
                Op::Softmax(x) => {
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, y * &(&g - &dot));
                }
                Op::Pick(x, idx) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    for (r, &c) in idx.iter().enumerate() {
                        gx[[r, c]] += g[[r, 0]];
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::GatherRows(x, idx) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    for (r, &src) in idx.iter().enumerate() {
                        gx.row_mut(src).scaled_add(1.0, &g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::EdgeAggregate { w, x, edges } => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    if self.rg(*w) {
                        let gw = Array2::from_shape_fn((edges.len(), 1), |(e, _)| {
                            g.row(edges.dst[e]).dot(&xv.row(edges.src[e]))
                        });
                        acc(&mut grads, *w, gw);
                    }
                    if self.rg(*x) {
                        let mut gx = Array2::zeros(shape(xv));
                        for e in 0..edges.len() {
                            gx.row_mut(edges.src[e]).scaled_add(wv[[e, 0]], &g.row(edges.dst[e]));
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::EdgeSoftmax(x, edges) => {
                    let mut group = vec![0.0; edges.n_dst];
                    for e in 0..edges.len() {
                        group[edges.dst[e]] += g[[e, 0]] * y[[e, 0]];
                    }
                    let gx = Array2::from_shape_fn((edges.len(), 1), |(e, _)| {
                        y[[e, 0]] * (g[[e, 0]] - group[edges.dst[e]])
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        acc(&mut grads, *a, bv * &g);
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, av * &g);
                    }
                }
                Op::RowNormalize(x, eps) => {
                    let xv = self.value(*x);
                    let mut gx = Array2::zeros(shape(xv));
                    for r in 0..xv.nrows() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let n = xr.dot(&xr).sqrt();
                        let mut out = gx.row_mut(r);
                        if n > *eps {
                            out.scaled_add(1.0 / n, &gr);
                            out.scaled_add(-xr.dot(&gr) / (n * n * n), &xr);
                        } else {
                            out.scaled_add(1.0 / eps, &gr);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = self.shape(*p).1;
                        if self.rg(*p) {
                            acc(&mut grads, *p, g.slice(s![.., start..start + width]).to_owned());
                        }
                        start += width;
                    }
                }
                Op::SliceCols(x, start, end) => {
                    let mut gx = Array2::zeros(self.shape(*x));
                    gx.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
            }
        }
        Gradients { grads }
    }
}
