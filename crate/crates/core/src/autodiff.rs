//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the [`Tape`] is a 2-D array. Token matrices follow the
//! channel-major convention used throughout the crate: rows are channels,
//! columns are tokens. Scalars are `1 × 1` matrices.
//!
//! Nodes record which of their inputs require a gradient, so frozen weights
//! and image data cost nothing on the backward pass.

use ndarray::{concatenate, s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddColumn(Var, Var),
    MulRow(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulColumn(Var, Var),
    SliceCols(Var, usize),
    GatherCols(Var, Vec<Option<usize>>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumRows(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    NormalizeCols(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    PowConst(Var, f64),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
}

/// A linear record of operations, replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn normalize_cols(x: &Array2<f64>, eps: f64) -> Array2<f64> {
    let n = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let mean = col.sum() / n;
        let var = col.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let inv = 1.0 / (var + eps).sqrt();
        col.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn assert_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) {
    assert_eq!(a.dim(), b.dim(), "{what}: shape mismatch {:?} vs {:?}", a.dim(), b.dim());
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.values[v.0];
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf with no gradient (data, frozen weights).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.ncols(), vb.nrows(), "matmul: {:?} x {:?}", va.dim(), vb.dim());
        let out = va.dot(vb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.values[a.0].t().to_owned();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.values[a.0], &self.values[b.0], "add");
        let out = &self.values[a.0] + &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.values[a.0], &self.values[b.0], "sub");
        let out = &self.values[a.0] - &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.values[a.0], &self.values[b.0], "mul");
        let out = &self.values[a.0] * &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.values[a.0], &self.values[b.0], "div");
        let out = &self.values[a.0] / &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Div(a, b), ng)
    }

    /// `x + column`, broadcasting an `r × 1` column across all columns of `x`.
    pub fn add_column(&mut self, x: Var, column: Var) -> Var {
        let (vx, vc) = (&self.values[x.0], &self.values[column.0]);
        assert_eq!(vc.dim(), (vx.nrows(), 1), "add_column: {:?} + {:?}", vx.dim(), vc.dim());
        let out = vx + vc;
        let ng = self.ng(x) || self.ng(column);
        self.push(out, Op::AddColumn(x, column), ng)
    }

    /// `x * row`, broadcasting a `1 × c` row down all rows of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (&self.values[x.0], &self.values[row.0]);
        assert_eq!(vr.dim(), (1, vx.ncols()), "mul_row: {:?} * {:?}", vx.dim(), vr.dim());
        let out = vx * vr;
        let ng = self.ng(x) || self.ng(row);
        self.push(out, Op::MulRow(x, row), ng)
    }

    /// `x * column`, broadcasting an `r × 1` column across all columns of `x`.
    pub fn mul_column(&mut self, x: Var, column: Var) -> Var {
        let (vx, vc) = (&self.values[x.0], &self.values[column.0]);
        assert_eq!(vc.dim(), (vx.nrows(), 1), "mul_column: {:?} * {:?}", vx.dim(), vc.dim());
        let out = vx * vc;
        let ng = self.ng(x) || self.ng(column);
        self.push(out, Op::MulColumn(x, column), ng)
    }

    /// `x * s` for a `1 × 1` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = &self.values[x.0] * sv;
        let ng = self.ng(x) || self.ng(s);
        self.push(out, Op::ScaleBy(x, s), ng)
    }

    pub fn scale(&mut self, x: Var, f: f64) -> Var {
        let out = &self.values[x.0] * f;
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, f), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = &self.values[x.0] + c;
        let ng = self.ng(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.values[x.0].slice(s![.., start..end]).to_owned();
        let ng = self.ng(x);
        self.push(out, Op::SliceCols(x, start), ng)
    }

    /// Column `j` of the output is column `index[j]` of `x`, or zeros for `None`.
    pub fn gather_cols(&mut self, x: Var, index: Vec<Option<usize>>) -> Var {
        let vx = &self.values[x.0];
        let mut out = Array2::zeros((vx.nrows(), index.len()));
        for (j, src) in index.iter().enumerate() {
            if let Some(k) = *src {
                out.column_mut(j).assign(&vx.column(k));
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::GatherCols(x, index), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.values[x.0].slice(s![start..end, ..]).to_owned();
        let ng = self.ng(x);
        self.push(out, Op::SliceRows(x, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row count mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column count mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Sums over rows, giving a `1 × c` row (per-column totals).
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let out = self.values[x.0].sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(x);
        self.push(out, Op::SumRows(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.values[x.0].sum());
        let ng = self.ng(x);
        self.push(out, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(&self.values[x.0]);
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// Zero-mean, unit-variance normalization of every column (layer norm
    /// over channels, without the affine part).
    pub fn normalize_cols(&mut self, x: Var, eps: f64) -> Var {
        let out = normalize_cols(&self.values[x.0], eps);
        let ng = self.ng(x);
        self.push(out, Op::NormalizeCols(x, eps), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].mapv(gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.values[x.0].mapv(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.values[x.0].mapv(f64::sqrt);
        let ng = self.ng(x);
        self.push(out, Op::Sqrt(x), ng)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.values[x.0].mapv(f64::ln);
        let ng = self.ng(x);
        self.push(out, Op::Ln(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.values[x.0].mapv(f64::abs);
        let ng = self.ng(x);
        self.push(out, Op::Abs(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.values[x.0].mapv(|v| v * v);
        let ng = self.ng(x);
        self.push(out, Op::Square(x), ng)
    }

    /// `x^p` for non-negative `x`.
    pub fn pow_const(&mut self, x: Var, p: f64) -> Var {
        let out = self.values[x.0].mapv(|v| v.powf(p));
        let ng = self.ng(x);
        self.push(out, Op::PowConst(x, p), ng)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.values[a.0], &self.values[b.0], "maximum");
        let mut out = self.values[a.0].clone();
        Zip::from(&mut out).and(&self.values[b.0]).for_each(|o, &bv| *o = o.max(bv));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Maximum(a, b), ng)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        assert_same_shape(&self.values[a.0], &self.values[b.0], "minimum");
        let mut out = self.values[a.0].clone();
        Zip::from(&mut out).and(&self.values[b.0]).for_each(|o, &bv| *o = o.min(bv));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Minimum(a, b), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.values[x.0].mapv(|v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(out, Op::Clamp(x, lo, hi), ng)
    }

    /// Runs the reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.values[v.0];
        let mut acc = |v: Var, d: Array2<f64>| {
            if !self.needs_grad[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * val(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if self.ng(*a) {
                    acc(*a, g / vb);
                }
                if self.ng(*b) {
                    let out = &self.values[idx];
                    acc(*b, -(g * out) / vb);
                }
            }
            Op::AddColumn(x, c) => {
                acc(*x, g.clone());
                if self.ng(*c) {
                    acc(*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::MulRow(x, r) => {
                if self.ng(*x) {
                    acc(*x, g * val(*r));
                }
                if self.ng(*r) {
                    acc(*r, (g * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::ScaleBy(x, s) => {
                if self.ng(*x) {
                    acc(*x, g * self.scalar(*s));
                }
                if self.ng(*s) {
                    acc(*s, Array2::from_elem((1, 1), (g * val(*x)).sum()));
                }
            }
            Op::Scale(x, f) => acc(*x, g * *f),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::MulColumn(x, c) => {
                if self.ng(*x) {
                    acc(*x, g * val(*c));
                }
                if self.ng(*c) {
                    acc(*c, (g * val(*x)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::GatherCols(x, index) => {
                let mut d = Array2::zeros(val(*x).dim());
                for (j, src) in index.iter().enumerate() {
                    if let Some(k) = *src {
                        let mut col = d.column_mut(k);
                        col += &g.column(j);
                    }
                }
                acc(*x, d);
            }
            Op::SliceCols(x, start) => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*x, d);
            }
            Op::SliceRows(x, start) => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    acc(*p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    acc(*p, g.slice(s![offset..offset + h, ..]).to_owned());
                    offset += h;
                }
            }
            Op::SumRows(x) => {
                let d = g.broadcast(val(*x).dim()).expect("sum_rows broadcast").to_owned();
                acc(*x, d);
            }
            Op::SumAll(x) => acc(*x, Array2::from_elem(val(*x).dim(), g[[0, 0]])),
            Op::SoftmaxRows(x) => {
                let y = &self.values[idx];
                let gy = g * y;
                let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*x, gy - &(y * &dot));
            }
            Op::NormalizeCols(x, eps) => {
                let y = &self.values[idx];
                let vx = val(*x);
                let n = vx.nrows() as f64;
                let mut d = Array2::zeros(vx.dim());
                for j in 0..vx.ncols() {
                    let col = vx.column(j);
                    let mean = col.sum() / n;
                    let var = col.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gc = g.column(j);
                    let yc = y.column(j);
                    let g_mean = gc.sum() / n;
                    let gy_mean = gc.iter().zip(yc.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for i in 0..vx.nrows() {
                        d[[i, j]] = inv * (gc[i] - g_mean - yc[i] * gy_mean);
                    }
                }
                acc(*x, d);
            }
            Op::Gelu(x) => {
                let mut d = val(*x).mapv(gelu_grad);
                d *= g;
                acc(*x, d);
            }
            Op::Sigmoid(x) => {
                let mut d = self.values[idx].mapv(|y| y * (1.0 - y));
                d *= g;
                acc(*x, d);
            }
            Op::Sqrt(x) => {
                // Subgradient 0 at the origin.
                let y = &self.values[idx];
                let mut d = y.mapv(|v| if v > 0.0 { 0.5 / v } else { 0.0 });
                d *= g;
                acc(*x, d);
            }
            Op::Ln(x) => acc(*x, g / val(*x)),
            Op::Abs(x) => {
                let mut d = val(*x).mapv(f64::signum);
                Zip::from(&mut d).and(val(*x)).for_each(|d, &v| {
                    if v == 0.0 {
                        *d = 0.0;
                    }
                });
                d *= g;
                acc(*x, d);
            }
            Op::Square(x) => acc(*x, g * &(val(*x) * 2.0)),
            Op::PowConst(x, p) => {
                let p = *p;
                let mut d = val(*x).mapv(|v| if v == 0.0 { 0.0 } else { p * v.powf(p - 1.0) });
                d *= g;
                acc(*x, d);
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                Zip::from(&mut da).and(&mut db).and(va).and(vb).for_each(|da, db, &x, &y| {
                    if x >= y {
                        *db = 0.0;
                    } else {
                        *da = 0.0;
                    }
                });
                acc(*a, da);
                acc(*b, db);
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                Zip::from(&mut da).and(&mut db).and(va).and(vb).for_each(|da, db, &x, &y| {
                    if x <= y {
                        *db = 0.0;
                    } else {
                        *da = 0.0;
                    }
                });
                acc(*a, da);
                acc(*b, db);
            }
            Op::Clamp(x, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*x)).for_each(|d, &v| {
                    if v < *lo || v > *hi {
                        *d = 0.0;
                    }
                });
                acc(*x, d);
            }
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if one reached it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
