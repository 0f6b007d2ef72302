//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! always 2-D (`rows × cols`); vectors are stored as `1 × n` rows and
//! scalars as `1 × 1`. [`Tape::backward`] walks the record in reverse
//! and returns the gradients of every leaf that asked for one.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::nn::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved state of the fused unbiased MMD² estimator.
#[derive(Debug)]
pub struct MmdSaved {
    prior: Array2<f64>,
    bandwidths: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Rc<Array2<f64>>),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    ColSums(Var),
    RowSums(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Array2<f64>),
    NormalizeRows(Var, Array2<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    Transpose(Var),
    Mmd(Var, Box<MmdSaved>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b)
            | MulCol(a, b) => vec![*a, *b],
            MulConst(a, _) | Scale(a, _) | Shift(a) | Relu(a) | Sigmoid(a) | Tanh(a) | Exp(a)
            | Ln(a) | Softplus(a) | Abs(a) | Clamp(a, _, _) | SumAll(a) | ColSums(a)
            | RowSums(a) | SoftmaxRows(a) | LogSoftmaxRows(a) | LayerNormRows(a, _)
            | NormalizeRows(a, _) | SliceCols(a, _) | SliceRows(a, _) | GatherRows(a, _)
            | SegmentSum(a, _) | Transpose(a) | Mmd(a, _) => vec![*a],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Gradients of leaves after [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    nodes: HashMap<Var, Array2<f64>>,
    params: HashMap<ParamId, Array2<f64>>,
}

impl Gradients {
    /// Gradient of a tracked input leaf, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.get(&v)
    }

    /// Gradient of a parameter, if the loss depends on it.
    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Array2<f64>> {
        self.params.get_mut(&id)
    }

    /// Gradient of `id`, or zeros shaped like `like` when the loss never reached it.
    pub fn param_or_zero(&self, id: ParamId, like: &Array2<f64>) -> Array2<f64> {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(like.raw_dim()))
    }
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn multi_rbf(d2: f64, bandwidths: &[f64]) -> f64 {
    bandwidths
        .iter()
        .map(|s| (-d2 / (2.0 * s * s)).exp())
        .sum()
}

/// Sum over ordered pairs `i != j` of `k(a_i, b_j)`, in row-major order.
fn offdiag_kernel_sum(a: &Array2<f64>, b: &Array2<f64>, bandwidths: &[f64]) -> f64 {
    let n = a.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += multi_rbf(sq_dist(a.row(i), b.row(j)), bandwidths);
            }
        }
    }
    total
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let tracked = op.parents().iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input. Receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input leaf; its gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Bind a parameter from `store`. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            tracked: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let x = &self.nodes[v.0].value;
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Whether `node`'s value was computed (transitively) from `source`.
    pub fn depends_on(&self, node: Var, source: Var) -> bool {
        if node.0 < source.0 {
            return false;
        }
        let mut seen = vec![false; node.0 + 1];
        let mut stack = vec![node];
        while let Some(v) = stack.pop() {
            if v == source {
                return true;
            }
            if seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            for p in self.nodes[v.0].op.parents() {
                if p.0 >= source.0 && !seen[p.0] {
                    stack.push(p);
                }
            }
        }
        false
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a ⊙ row`, broadcasting a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row: width mismatch");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// `a ⊙ col`, broadcasting an `m × 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1);
        assert_eq!(self.shape(a).0, self.shape(col).0, "mul_col: height mismatch");
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    /// Elementwise product with a fixed matrix (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Rc<Array2<f64>>) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const: shape mismatch");
        let v = self.value(a) * &*c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::Shift(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    // ---- pointwise ----

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(stable_softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums as a `1 × n` row.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::ColSums(a))
    }

    /// Row sums as an `m × 1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSums(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (m, n) = x.dim();
        let mut y = Array2::zeros((m, n));
        let mut inv = Array2::zeros((m, 1));
        for (r, row) in x.rows().into_iter().enumerate() {
            let mu = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv[[r, 0]] = is;
            for c in 0..n {
                y[[r, c]] = (row[c] - mu) * is;
            }
        }
        self.push(y, Op::LayerNormRows(a, inv))
    }

    /// Scale each row to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        let mut norms = Array2::zeros((x.nrows(), 1));
        for (r, mut row) in y.rows_mut().into_iter().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[[r, 0]] = n;
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
        self.push(y, Op::NormalizeRows(a, norms))
    }

    // ---- structure ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: height mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    /// `out[r] = a[index[r]]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((index.len(), x.ncols()));
        for (r, &i) in index.iter().enumerate() {
            v.row_mut(r).assign(&x.row(i));
        }
        self.push(v, Op::GatherRows(a, index))
    }

    /// `out[segment[r]] += a[r]`, producing `segments` rows.
    pub fn segment_sum(&mut self, a: Var, segment: Rc<[usize]>, segments: usize) -> Var {
        let x = self.value(a);
        assert_eq!(segment.len(), x.nrows(), "segment_sum: one id per row");
        let mut v = Array2::zeros((segments, x.ncols()));
        for (r, &sg) in segment.iter().enumerate() {
            let mut dst = v.row_mut(sg);
            dst += &x.row(r);
        }
        self.push(v, Op::SegmentSum(a, segment))
    }

    /// Unbiased multi-bandwidth RBF MMD² between the rows of `samples` and a
    /// fixed reference set of equal size. Pairs with equal index are dropped
    /// from all three blocks, so identical inputs give exactly zero.
    pub fn mmd_unbiased(&mut self, samples: Var, prior: Array2<f64>, bandwidths: Vec<f64>) -> Var {
        let x = self.value(samples);
        assert_eq!(x.dim(), prior.dim(), "mmd: sample/prior shape mismatch");
        let b = x.nrows();
        assert!(b >= 2, "mmd: need at least two samples");
        let c = 1.0 / (b * (b - 1)) as f64;
        let sxx = offdiag_kernel_sum(x, x, &bandwidths);
        let syy = offdiag_kernel_sum(&prior, &prior, &bandwidths);
        let sxy = offdiag_kernel_sum(x, &prior, &bandwidths);
        let syx = offdiag_kernel_sum(&prior, x, &bandwidths);
        let value = c * ((sxx + syy) - (sxy + syx));
        self.push(
            Array2::from_elem((1, 1), value),
            Op::Mmd(samples, Box::new(MmdSaved { prior, bandwidths })),
        )
    }

    // ---- backward ----

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.nodes.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                op => self.propagate(op, &node.value, g, &mut grads),
            }
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, y: &Array2<f64>, g: Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                if self.nodes[a.0].tracked {
                    self.accumulate(grads, *a, g.dot(&val(b).t()));
                }
                if self.nodes[b.0].tracked {
                    self.accumulate(grads, *b, val(a).t().dot(&g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, -&g);
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, &g * val(b));
                self.accumulate(grads, *b, &g * val(a));
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                self.accumulate(grads, *a, g);
            }
            Op::MulRow(a, r) => {
                let gr = (&g * val(a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *r, gr);
                self.accumulate(grads, *a, &g * val(r));
            }
            Op::MulCol(a, c) => {
                let gc = (&g * val(a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                self.accumulate(grads, *c, gc);
                self.accumulate(grads, *a, &g * val(c));
            }
            Op::MulConst(a, c) => self.accumulate(grads, *a, &g * &**c),
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Shift(a) => self.accumulate(grads, *a, g),
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::Relu(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(val(a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(y).for_each(|d, &s| *d *= s * (1.0 - s));
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(y).for_each(|d, &t| *d *= 1.0 - t * t);
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * y),
            Op::Ln(a) => self.accumulate(grads, *a, g / val(a)),
            Op::Softplus(a) => {
                let mut ga = g;
                Zip::from(&mut ga)
                    .and(val(a))
                    .for_each(|d, &x| *d *= stable_sigmoid(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let mut ga = g;
                Zip::from(&mut ga).and(val(a)).for_each(|d, &x| {
                    *d *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let mut ga = g;
                Zip::from(&mut ga).and(val(a)).for_each(|d, &x| {
                    if !(x > *lo && x < *hi) {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let k = g[[0, 0]];
                self.accumulate(grads, *a, Array2::from_elem(val(a).raw_dim(), k));
            }
            Op::ColSums(a) => {
                let ga = g.broadcast(val(a).raw_dim()).unwrap().to_owned();
                self.accumulate(grads, *a, ga);
            }
            Op::RowSums(a) => {
                let ga = g.broadcast(val(a).raw_dim()).unwrap().to_owned();
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = &g * y;
                let dots = ga.sum_axis(Axis(1)).insert_axis(Axis(1));
                ga -= &(y * &dots);
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let ga = &g - &(y.mapv(f64::exp) * &sums);
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNormRows(a, inv) => {
                let n = y.ncols() as f64;
                let mean_g = g.sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
                let mean_gy = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1)) / n;
                let ga = (&g - &mean_g - &(y * &mean_gy)) * inv;
                self.accumulate(grads, *a, ga);
            }
            Op::NormalizeRows(a, norms) => {
                let dots = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut ga = &g - &(y * &dots);
                for (mut row, &n) in ga.rows_mut().into_iter().zip(norms.iter()) {
                    if n > 0.0 {
                        row.mapv_inplace(|v| v / n);
                    } else {
                        row.fill(0.0);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(p).ncols();
                    self.accumulate(grads, *p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = val(p).nrows();
                    self.accumulate(grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(val(a).raw_dim());
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                self.accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(val(a).raw_dim());
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, index) => {
                let mut ga = Array2::zeros(val(a).raw_dim());
                for (r, &i) in index.iter().enumerate() {
                    let mut dst = ga.row_mut(i);
                    dst += &g.row(r);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SegmentSum(a, segment) => {
                let mut ga = Array2::zeros(val(a).raw_dim());
                for (r, &sg) in segment.iter().enumerate() {
                    ga.row_mut(r).assign(&g.row(sg));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Mmd(a, saved) => {
                let x = val(a);
                let (b, d) = x.dim();
                let c = 1.0 / (b * (b - 1)) as f64;
                let scale = 2.0 * c * g[[0, 0]];
                let mut ga = Array2::zeros((b, d));
                for i in 0..b {
                    let xi = x.row(i);
                    let mut acc = vec![0.0; d];
                    for j in 0..b {
                        if j == i {
                            continue;
                        }
                        for (other, sign) in [(x.row(j), 1.0), (saved.prior.row(j), -1.0)] {
                            let d2 = sq_dist(xi, other);
                            let w: f64 = saved
                                .bandwidths
                                .iter()
                                .map(|s| (-d2 / (2.0 * s * s)).exp() / (s * s))
                                .sum();
                            for k in 0..d {
                                acc[k] -= sign * w * (xi[k] - other[k]);
                            }
                        }
                    }
                    for k in 0..d {
                        ga[[i, k]] = scale * acc[k];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((m, n), |_| rng.random_range(-1.5..1.5))
    }

    /// Compare the tape gradient of `sum(W ⊙ f(x))` with central differences.
    fn check(shape: (usize, usize), f: impl Fn(&mut Tape, Var) -> Var) {
        check_at(random(&mut ChaCha8Rng::seed_from_u64(11), shape.0, shape.1), f)
    }

    fn check_at(x0: Array2<f64>, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probe = |t: &mut Tape, x: Var, w: &Array2<f64>| {
            let y = f(t, x);
            let wy = t.mul_const(y, Rc::new(w.clone()));
            t.sum(wy)
        };
        let mut t = Tape::new();
        let x = t.input(x0.clone());
        let y = f(&mut t, x);
        let shape = t.shape(y);
        let w = random(&mut rng, shape.0, shape.1);

        let mut t = Tape::new();
        let x = t.input(x0.clone());
        let loss = probe(&mut t, x, &w);
        let analytic = t
            .backward(loss)
            .wrt(x)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(x0.raw_dim()));

        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut t = Tape::new();
                let x = t.input(xp);
                let l = probe(&mut t, x, &w);
                t.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(err < 1e-7, "entry {idx}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn binary_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 4);
        let col = random(&mut rng, 3, 1);
        let m = random(&mut rng, 4, 2);
        check((3, 4), |t, x| {
            let c = t.constant(m.clone());
            t.matmul(x, c)
        });
        check((2, 3), |t, x| {
            let c = t.constant(b.clone());
            t.matmul(x, c)
        });
        check((3, 4), |t, x| {
            let c = t.constant(b.clone());
            let s = t.add(x, c);
            let d = t.sub(s, x);
            let e = t.mul(d, x);
            t.mul(e, x)
        });
        check((3, 4), |t, x| {
            let r = t.constant(row.clone());
            let y = t.add_row(x, r);
            t.mul_row(y, r)
        });
        check((1, 4), |t, r| {
            let a = t.constant(b.clone());
            let y = t.mul_row(a, r);
            let y = t.add_row(y, r);
            t.tanh(y)
        });
        check((3, 1), |t, c| {
            let a = t.constant(b.clone());
            t.mul_col(a, c)
        });
        check((3, 4), |t, x| {
            let c = t.constant(col.clone());
            let y = t.mul_col(x, c);
            let y = t.mul_const(y, Rc::new(b.clone()));
            let y = t.scale(y, -2.5);
            let y = t.add_scalar(y, 0.3);
            t.transpose(y)
        });
    }

    #[test]
    fn pointwise_ops() {
        check((3, 4), |t, x| t.relu(x));
        check((3, 4), |t, x| t.sigmoid(x));
        check((3, 4), |t, x| t.tanh(x));
        check((3, 4), |t, x| t.exp(x));
        check((3, 4), |t, x| t.softplus(x));
        check((3, 4), |t, x| t.abs(x));
        check((3, 4), |t, x| t.clamp(x, -0.7, 0.9));
        check((3, 4), |t, x| {
            let e = t.exp(x);
            t.ln(e)
        });
    }

    #[test]
    fn reductions_and_row_ops() {
        check((3, 4), |t, x| t.sum(x));
        check((3, 4), |t, x| t.mean(x));
        check((3, 4), |t, x| t.col_sums(x));
        check((3, 4), |t, x| t.row_sums(x));
        check((3, 4), |t, x| t.softmax_rows(x));
        check((3, 4), |t, x| t.log_softmax_rows(x));
        check((3, 5), |t, x| t.layer_norm_rows(x, 1e-5));
        check((3, 4), |t, x| t.normalize_rows(x));
    }

    #[test]
    fn structural_ops() {
        check((4, 3), |t, x| {
            let a = t.slice_cols(x, 1, 2);
            let b = t.slice_rows(x, 0, 2);
            let d = t.matmul(a, b);
            let d = t.transpose(d);
            let d = t.transpose(d);
            let c = t.concat_cols(&[a, d]);
            let head = t.slice_cols(x, 0, 2);
            let y = t.concat_cols(&[x, head, d]);
            let y = t.slice_cols(y, 0, 4);
            let c = t.slice_cols(c, 0, 4);
            t.concat_rows(&[y, c])
        });
        let idx: Rc<[usize]> = Rc::from(vec![2, 0, 2, 1, 3]);
        check((4, 3), |t, x| t.gather_rows(x, idx.clone()));
        let seg: Rc<[usize]> = Rc::from(vec![1, 0, 1, 1]);
        check((4, 3), |t, x| t.segment_sum(x, seg.clone(), 3));
    }

    #[test]
    fn mmd_gradient_and_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prior = random(&mut rng, 5, 3);
        let bw = vec![0.5, 1.0, 2.0];
        check((5, 3), |t, x| t.mmd_unbiased(x, prior.clone(), bw.clone()));

        let mut t = Tape::new();
        let x = t.constant(prior.clone());
        let m = t.mmd_unbiased(x, prior.clone(), bw.clone());
        assert_eq!(t.scalar(m), 0.0);
    }

    #[test]
    fn layer_norm_and_normalize_values() {
        let mut t = Tape::new();
        let x = t.constant(ndarray::array![[1.0, 3.0], [0.0, 0.0]]);
        let n = t.normalize_rows(x);
        assert_eq!(t.value(n)[[1, 0]], 0.0);
        let l = t.layer_norm_rows(x, 0.0);
        assert_eq!(t.value(l).row(0).to_vec(), vec![-1.0, 1.0]);
    }

    #[test]
    fn params_bind_once_and_collect_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", ndarray::array![[2.0]]);
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        assert_eq!(a, b);
        let y = t.mul(a, b);
        let g = t.backward(y);
        assert_eq!(g.param(id).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(ndarray::array![[1.0, 2.0]]);
        let x = t.input(ndarray::array![[3.0, 4.0]]);
        let y = t.mul(c, x);
        let s = t.sum(y);
        let g = t.backward(s);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap(), &ndarray::array![[1.0, 2.0]]);
        assert!(t.depends_on(s, x));
        assert!(!t.depends_on(c, x));
    }
}
