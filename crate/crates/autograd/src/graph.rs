use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::Matrix;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var, Option<Vec<bool>>),
    LayerNorm(Var, Vec<f64>),
    L2Normalize(Var, Vec<f64>),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    RowSum(Var),
    ColSum(Var),
    SumAll(Var),
    Im2Col {
        input: Var,
        height: usize,
        width: usize,
        kernel: usize,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// An eagerly evaluated computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` is on a path from a
    /// trainable leaf to the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    // ---- dense products ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row: row must be 1×{n}");
        let out = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row: row must be 1×{n}");
        let out = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    /// Scales row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, _) = self.shape(a);
        assert_eq!(self.shape(col), (m, 1), "mul_col: column must be {m}×1");
        let out = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    // ---- row-wise normalizations -----------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise log-softmax. When `keep` is given (row-major, one flag per
    /// entry), entries flagged `false` are removed from the normalization:
    /// their output is `0.0` and they receive no gradient.
    pub fn log_softmax_rows(&mut self, a: Var, keep: Option<Vec<bool>>) -> Var {
        let (m, n) = self.shape(a);
        if let Some(k) = &keep {
            assert_eq!(k.len(), m * n, "log_softmax_rows: keep mask length");
        }
        let mut out = self.value(a).clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let kept = |j: usize| keep.as_ref().is_none_or(|k| k[i * n + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if kept(j) {
                    max = max.max(row[j]);
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if kept(j) {
                    sum += (row[j] - max).exp();
                }
            }
            let lse = max + sum.ln();
            for j in 0..n {
                row[j] = if kept(j) { row[j] - lse } else { 0.0 };
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a, keep), ng)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let n = out.ncols() as f64;
        let mut inv_std = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    /// Row-wise L2 normalization. Rows must have nonzero norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / norm);
            norms.push(norm);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2Normalize(a, norms), ng)
    }

    // ---- structural -------------------------------------------------------

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column count mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row count mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Stacks the selected rows of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Collects the listed `(row, col)` entries into an `n×1` column.
    pub fn gather_elems(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let src = self.value(a);
        let out = Array2::from_shape_fn((idx.len(), 1), |(i, _)| src[idx[i]]);
        let ng = self.ng(a);
        self.push(out, Op::GatherElems(a, idx.to_vec()), ng)
    }

    /// Sum of each row, as an `m×1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(out, Op::RowSum(a), ng)
    }

    /// Sum over rows, as a `1×n` row.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(out, Op::ColSum(a), ng)
    }

    /// Mean over rows, as a `1×n` row.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let m = self.shape(a).0 as f64;
        let s = self.col_sum(a);
        self.scale(s, 1.0 / m)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of a list of `1×1` scalars (or equally shaped matrices).
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_all: no inputs");
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Unfolds a row-major `height×width` grid with `channels` columns into
    /// `kernel×kernel` neighbourhoods with zero padding: output row `p` holds
    /// the `kernel²·channels` values around grid position `p`, ordered by
    /// kernel offset (row-major) then channel.
    pub fn im2col(&mut self, a: Var, height: usize, width: usize, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "im2col: kernel must be odd");
        let src = self.value(a);
        let (rows, ch) = src.dim();
        assert_eq!(
            rows,
            height * width,
            "im2col: grid {height}×{width} does not match {rows} rows"
        );
        let pad = (kernel / 2) as isize;
        let mut out = Array2::zeros((rows, kernel * kernel * ch));
        for r in 0..height as isize {
            for c in 0..width as isize {
                let p = (r * width as isize + c) as usize;
                for dr in -pad..=pad {
                    for dc in -pad..=pad {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr < 0 || cc < 0 || rr >= height as isize || cc >= width as isize {
                            continue;
                        }
                        let q = (rr * width as isize + cc) as usize;
                        let k = ((dr + pad) * kernel as isize + (dc + pad)) as usize;
                        out.slice_mut(s![p, k * ch..(k + 1) * ch])
                            .assign(&src.row(q));
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(
            out,
            Op::Im2Col {
                input: a,
                height,
                width,
                kernel,
            },
            ng,
        )
    }

    // ---- reverse pass -----------------------------------------------------

    /// Back-propagates from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, gy.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t().dot(gy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(*a, gy.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, gy.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, -gy);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, gy * self.value(*b));
                }
                if self.ng(*b) {
                    acc(*b, gy * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, gy.clone());
                if self.ng(*row) {
                    acc(*row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    acc(*a, gy * self.value(*row));
                }
                if self.ng(*row) {
                    let prod = gy * self.value(*a);
                    acc(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if self.ng(*a) {
                    acc(*a, gy * self.value(*col));
                }
                if self.ng(*col) {
                    let prod = gy * self.value(*a);
                    acc(*col, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, k) => acc(*a, gy * *k),
            Op::AddScalar(a) => acc(*a, gy.clone()),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut g = gy.clone();
                g.zip_mut_with(x, |g, &x| {
                    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    *g *= d;
                });
                acc(*a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = gy.clone();
                g.zip_mut_with(y, |g, &s| *g *= s * (1.0 - s));
                acc(*a, g);
            }
            Op::Relu(a) => {
                let mut g = gy.clone();
                g.zip_mut_with(self.value(*a), |g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                acc(*a, g);
            }
            Op::Abs(a) => {
                let mut g = gy.clone();
                g.zip_mut_with(self.value(*a), |g, &x| {
                    *g *= x.signum() * f64::from(u8::from(x != 0.0))
                });
                acc(*a, g);
            }
            Op::Square(a) => {
                let mut g = gy.clone();
                g.zip_mut_with(self.value(*a), |g, &x| *g *= 2.0 * x);
                acc(*a, g);
            }
            Op::Softmax(a) => {
                let mut g = gy * y;
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let dot = grow.sum();
                    grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv * dot);
                }
                acc(*a, g);
            }
            Op::LogSoftmax(a, keep) => {
                let n = y.ncols();
                let mut g = gy.clone();
                for (r, mut grow) in g.rows_mut().into_iter().enumerate() {
                    let kept = |j: usize| keep.as_ref().is_none_or(|k| k[r * n + j]);
                    let mut total = 0.0;
                    for j in 0..n {
                        if kept(j) {
                            total += grow[j];
                        }
                    }
                    for j in 0..n {
                        grow[j] = if kept(j) {
                            grow[j] - y[[r, j]].exp() * total
                        } else {
                            0.0
                        };
                    }
                }
                acc(*a, g);
            }
            Op::LayerNorm(a, inv_std) => {
                let n = y.ncols() as f64;
                let mut g = gy.clone();
                for (r, mut grow) in g.rows_mut().into_iter().enumerate() {
                    let yrow = y.row(r);
                    let mean_g = grow.sum() / n;
                    let mean_gy = grow.dot(&yrow) / n;
                    let is = inv_std[r];
                    grow.zip_mut_with(&yrow, |gv, &yv| *gv = is * (*gv - mean_g - yv * mean_gy));
                }
                acc(*a, g);
            }
            Op::L2Normalize(a, norms) => {
                let mut g = gy.clone();
                for (r, mut grow) in g.rows_mut().into_iter().enumerate() {
                    let yrow = y.row(r);
                    let dot = grow.dot(&yrow);
                    let inv = 1.0 / norms[r];
                    grow.zip_mut_with(&yrow, |gv, &yv| *gv = inv * (*gv - yv * dot));
                }
                acc(*a, g);
            }
            Op::Transpose(a) => acc(*a, gy.t().to_owned()),
            Op::SliceRows(a, start) => {
                let mut g = Array2::zeros(self.shape(*a));
                g.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(gy);
                acc(*a, g);
            }
            Op::SliceCols(a, start) => {
                let mut g = Array2::zeros(self.shape(*a));
                g.slice_mut(s![.., *start..*start + gy.ncols()]).assign(gy);
                acc(*a, g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.ng(p) {
                        acc(p, gy.slice(s![off..off + rows, ..]).to_owned());
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    if self.ng(p) {
                        acc(p, gy.slice(s![.., off..off + cols]).to_owned());
                    }
                    off += cols;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut g = Array2::zeros(self.shape(*a));
                for (i, &r) in idx.iter().enumerate() {
                    let mut row = g.row_mut(r);
                    row += &gy.row(i);
                }
                acc(*a, g);
            }
            Op::GatherElems(a, idx) => {
                let mut g = Array2::zeros(self.shape(*a));
                for (i, &rc) in idx.iter().enumerate() {
                    g[rc] += gy[[i, 0]];
                }
                acc(*a, g);
            }
            Op::RowSum(a) => {
                let (m, n) = self.shape(*a);
                let g = Array2::from_shape_fn((m, n), |(r, _)| gy[[r, 0]]);
                acc(*a, g);
            }
            Op::ColSum(a) => {
                let (m, n) = self.shape(*a);
                let g = Array2::from_shape_fn((m, n), |(_, c)| gy[[0, c]]);
                acc(*a, g);
            }
            Op::SumAll(a) => {
                let g = Array2::from_elem(self.shape(*a), gy[[0, 0]]);
                acc(*a, g);
            }
            Op::Im2Col {
                input,
                height,
                width,
                kernel,
            } => {
                let (rows, ch) = self.shape(*input);
                let (h, w, k) = (*height as isize, *width as isize, *kernel);
                let pad = (k / 2) as isize;
                let mut g = Array2::zeros((rows, ch));
                for r in 0..h {
                    for c in 0..w {
                        let p = (r * w + c) as usize;
                        for dr in -pad..=pad {
                            for dc in -pad..=pad {
                                let (rr, cc) = (r + dr, c + dc);
                                if rr < 0 || cc < 0 || rr >= h || cc >= w {
                                    continue;
                                }
                                let q = (rr * w + cc) as usize;
                                let kk = ((dr + pad) * k as isize + (dc + pad)) as usize;
                                let mut dst = g.row_mut(q);
                                dst += &gy.slice(s![p, kk * ch..(kk + 1) * ch]);
                            }
                        }
                    }
                }
                acc(*input, g);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
