//! Matrix-level reverse-mode differentiation.
//!
//! Every node holds a dense [`Mat`]; operations are recorded in execution
//! order and [`Tape::backward`] walks them in reverse. The operation set is
//! exactly what the encoder and the losses need, nothing more.

use super::mat::{dot, norm, Mat};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    AddRow(usize, usize),
    Tanh(usize),
    NormalizeRows(usize),
    ConcatCols(usize, usize),
    BroadcastRows(usize),
    MeanRows(usize),
    SoftmaxRows(usize),
    EntropyRows(usize),
    SelectRows(usize, Vec<usize>),
    Sum(usize),
    RowNorms(usize),
    RowDots(usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Mat,
    op: Op,
    param: bool,
}

/// Recording of one forward evaluation. Not shared across threads; build a
/// fresh tape per evaluation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every parameter on the tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, param: Var) -> Result<&Mat> {
        self.grads
            .get(param.0)
            .and_then(Option::as_ref)
            .ok_or(Error::UnknownParameter(param.0))
    }
}

fn shape_err(what: &str, a: &Mat, b: &Mat) -> Error {
    Error::Shape(format!(
        "{what}: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, param: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn val(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul_nt(self.val(b))?;
        Ok(self.push(out, Op::MatMulNt(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).add(self.val(b))?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).sub(self.val(b))?;
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        if !x.same_shape(y) {
            return Err(shape_err("mul", x, y));
        }
        let out = x.zip_map(y, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.val(a).map(|x| scale * x + shift);
        self.push(out, Op::Affine(a.0, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `a` (m × n) plus the `1 × n` row `r` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (x, row) = (self.val(a), self.val(r));
        if row.rows() != 1 || row.cols() != x.cols() {
            return Err(shape_err("add_row", x, row));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(row.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a.0, r.0)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::tanh);
        self.push(out, Op::Tanh(a.0))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let out = self.val(a).normalize_rows();
        self.push(out, Op::NormalizeRows(a.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        if x.rows() != y.rows() {
            return Err(shape_err("concat_cols", x, y));
        }
        let cols = x.cols() + y.cols();
        let mut data = Vec::with_capacity(x.rows() * cols);
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let out = Mat::from_raw(x.rows(), cols, data);
        Ok(self.push(out, Op::ConcatCols(a.0, b.0)))
    }

    /// Repeats a `1 × n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let x = self.val(a);
        if x.rows() != 1 || rows == 0 {
            return Err(Error::Shape(format!(
                "broadcast_rows needs a single row, got {}x{}",
                x.rows(),
                x.cols()
            )));
        }
        let out = Mat::from_raw(rows, x.cols(), x.data().repeat(rows));
        Ok(self.push(out, Op::BroadcastRows(a.0)))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.val(a).mean_rows();
        self.push(out, Op::MeanRows(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a.0))
    }

    /// Shannon entropy (natural log) of each probability row, `m × 1`.
    pub fn entropy_rows(&mut self, p: Var) -> Var {
        let x = self.val(p);
        let data = (0..x.rows()).map(|r| entropy(x.row(r))).collect();
        let out = Mat::from_raw(x.rows(), 1, data);
        self.push(out, Op::EntropyRows(p.0))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.val(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= x.rows()) {
            return Err(Error::Shape(format!(
                "select_rows: indices {idx:?} out of range for {} rows",
                x.rows()
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * x.cols());
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let out = Mat::from_raw(idx.len(), x.cols(), data);
        Ok(self.push(out, Op::SelectRows(a.0, idx.to_vec())))
    }

    /// Sum of all entries, `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Mat::from_raw(1, 1, vec![s]), Op::Sum(a.0))
    }

    /// L2 norm of each row, `m × 1`.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let out = Mat::from_raw(self.val(a).rows(), 1, self.val(a).row_norms());
        self.push(out, Op::RowNorms(a.0))
    }

    /// Row-wise inner products, `m × 1`.
    pub fn row_dots(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        if !x.same_shape(y) {
            return Err(shape_err("row_dots", x, y));
        }
        let data = (0..x.rows()).map(|r| dot(x.row(r), y.row(r))).collect();
        let out = Mat::from_raw(x.rows(), 1, data);
        Ok(self.push(out, Op::RowDots(a.0, b.0)))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::UnknownParameter(loss.0));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::Shape("backward needs a 1x1 loss".into()));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                node.param.then(|| {
                    g.unwrap_or_else(|| Mat::zeros(node.value.rows(), node.value.cols()))
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// `∂loss/∂param`, same shape as `param`.
    pub fn grad(&self, loss: Var, param: Var) -> Result<Mat> {
        match self.nodes.get(param.0) {
            Some(node) if node.param => {}
            _ => return Err(Error::UnknownParameter(param.0)),
        }
        Ok(self.backward(loss)?.wrt(param)?.clone())
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) -> Result<()> {
        let v = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_nt(v(*b))?);
                accumulate(grads, *b, v(*a).matmul_tn(g)?);
            }
            Op::MatMulNt(a, b) => {
                accumulate(grads, *a, g.matmul(v(*b))?);
                accumulate(grads, *b, g.matmul_tn(v(*a))?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(v(*b), |p, q| p * q));
                accumulate(grads, *b, g.zip_map(v(*a), |p, q| p * q));
            }
            Op::Affine(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone());
                let mut col = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (c, x) in col.data_mut().iter_mut().zip(g.row(i)) {
                        *c += x;
                    }
                }
                accumulate(grads, *r, col);
            }
            Op::Tanh(a) => {
                accumulate(grads, *a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y)));
            }
            Op::NormalizeRows(a) => {
                let x = v(*a);
                let y = &node.value;
                let mut out = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = norm(x.row(r));
                    if n == 0.0 {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let proj = dot(yr, gr);
                    for ((o, &yi), &gi) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gi - yi * proj) / n;
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::ConcatCols(a, b) => {
                let ca = v(*a).cols();
                let cb = v(*b).cols();
                let mut ga = Vec::with_capacity(g.rows() * ca);
                let mut gb = Vec::with_capacity(g.rows() * cb);
                for r in 0..g.rows() {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, *a, Mat::from_raw(g.rows(), ca, ga));
                accumulate(grads, *b, Mat::from_raw(g.rows(), cb, gb));
            }
            Op::BroadcastRows(a) => {
                let mut col = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (c, x) in col.data_mut().iter_mut().zip(g.row(i)) {
                        *c += x;
                    }
                }
                accumulate(grads, *a, col);
            }
            Op::MeanRows(a) => {
                let m = v(*a).rows();
                let row: Vec<f64> = g.data().iter().map(|x| x / m as f64).collect();
                accumulate(grads, *a, Mat::from_raw(m, g.cols(), row.repeat(m)));
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut out = Mat::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = g.row(r);
                    let inner = dot(pr, gr);
                    for ((o, &pi), &gi) in out.row_mut(r).iter_mut().zip(pr).zip(gr) {
                        *o = pi * (gi - inner);
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::EntropyRows(p) => {
                let x = v(*p);
                let mut out = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gr = g.get(r, 0);
                    for (o, &pi) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                        // 0·log 0 := 0, and its derivative is taken as 0.
                        *o = if pi > 0.0 { -gr * (pi.ln() + 1.0) } else { 0.0 };
                    }
                }
                accumulate(grads, *p, out);
            }
            Op::SelectRows(a, idx) => {
                let x = v(*a);
                let mut out = Mat::zeros(x.rows(), x.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, gi) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += gi;
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::Sum(a) => {
                let x = v(*a);
                accumulate(grads, *a, Mat::filled(x.rows(), x.cols(), g.data()[0]));
            }
            Op::RowNorms(a) => {
                let x = v(*a);
                let mut out = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = node.value.get(r, 0);
                    if n == 0.0 {
                        continue;
                    }
                    let s = g.get(r, 0) / n;
                    for (o, xi) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                        *o = s * xi;
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::RowDots(a, b) => {
                let (x, y) = (v(*a), v(*b));
                let mut ga = Mat::zeros(x.rows(), x.cols());
                let mut gb = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let s = g.get(r, 0);
                    for (o, yi) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o = s * yi;
                    }
                    for (o, xi) in gb.row_mut(r).iter_mut().zip(x.row(r)) {
                        *o = s * xi;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Mat>], i: usize, g: Mat) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable softmax (max-shifted).
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}

pub(crate) fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}
