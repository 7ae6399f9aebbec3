//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Everything is a 2-D matrix; vectors are `1×n` rows or `n×1` columns.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row ranges `(start, len)` describing variable-length sequences stacked
/// into one matrix.
pub type Segments = Rc<[(usize, usize)]>;

const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

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
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    Tanh(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    PickPerRow(Var, Rc<[usize]>),
    Diag(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    RowMean(Var),
    SegmentMean(Var, Segments),
    ExpandSegments(Var, Segments),
    Softmax(Var),
    LogSoftmax(Var),
    NormalizeRows(Var),
    LayerNorm(Var, f64),
    ClampMin(Var, f64),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segs: Segments,
        heads: usize,
        probs: Vec<Mat>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss or does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<usize, Var>,
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input leaf whose gradient is tracked.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds an externally owned parameter identified by `key`. Binding the
    /// same key twice returns the same node.
    pub fn bind(&mut self, key: usize, value: &Mat, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.bound.insert(key, v);
        v
    }

    /// Parameter keys bound into this graph together with their nodes.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound.iter().map(|(&k, &v)| (k, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `x + row` with a `1×c` row broadcast over all rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    /// `x ⊙ row` with a `1×c` row broadcast over all rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) * self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::MulRow(x, row), rg)
    }

    /// `x ⊙ col` with an `r×1` column broadcast over all columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let value = self.value(x) * self.value(col);
        let rg = self.rg(x) || self.rg(col);
        self.push(value, Op::MulCol(x, col), rg)
    }

    /// `x · s` with `s` a `1×1` node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(x) * sv;
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::MulScalar(x, s), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) + c;
        let rg = self.rg(x);
        self.push(value, Op::AddConst(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|z| {
            let u = GELU_C * (z + 0.044715 * z * z * z);
            0.5 * z * (1.0 + u.tanh())
        });
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(x).iter().copied().collect();
        assert_eq!(flat.len(), rows * cols, "reshape size mismatch");
        let value = Mat::from_shape_vec((rows, cols), flat).expect("shape checked");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must match");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must match");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceCols(x, start), rg)
    }

    /// Row lookup: output row `i` is `x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let src = self.value(x);
        let mut value = Mat::zeros((idx.len(), src.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            value.row_mut(i).assign(&src.row(j));
        }
        let rg = self.rg(x);
        self.push(value, Op::GatherRows(x, idx.into()), rg)
    }

    /// Column `r×1` with entry `x[i, idx[i]]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Var {
        let src = self.value(x);
        let value = Mat::from_shape_fn((idx.len(), 1), |(i, _)| src[[i, idx[i]]]);
        let rg = self.rg(x);
        self.push(value, Op::PickPerRow(x, idx.into()), rg)
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Mat::from_shape_fn((src.nrows(), 1), |(i, _)| src[[i, i]]);
        let rg = self.rg(x);
        self.push(value, Op::Diag(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Mat::from_elem((1, 1), src.sum() / src.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::MeanAll(x), rg)
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(value, Op::RowSum(x), rg)
    }

    pub fn row_mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = src.sum_axis(Axis(1)).insert_axis(Axis(1)) / src.ncols() as f64;
        let rg = self.rg(x);
        self.push(value, Op::RowMean(x), rg)
    }

    /// Mean over each segment's rows: one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segs: &Segments) -> Var {
        let src = self.value(x);
        let mut value = Mat::zeros((segs.len(), src.ncols()));
        for (i, &(start, len)) in segs.iter().enumerate() {
            let m = src
                .slice(s![start..start + len, ..])
                .sum_axis(Axis(0))
                / len as f64;
            value.row_mut(i).assign(&m);
        }
        let rg = self.rg(x);
        self.push(value, Op::SegmentMean(x, segs.clone()), rg)
    }

    /// Inverse layout of [`Graph::segment_mean`]: repeats row `i` of `x` over
    /// every row of segment `i`.
    pub fn expand_segments(&mut self, x: Var, segs: &Segments) -> Var {
        let src = self.value(x);
        let total: usize = segs.iter().map(|&(_, l)| l).sum();
        let mut value = Mat::zeros((total, src.ncols()));
        for (i, &(start, len)) in segs.iter().enumerate() {
            for r in start..start + len {
                value.row_mut(r).assign(&src.row(i));
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::ExpandSegments(x, segs.clone()), rg)
    }

    /// Row-wise softmax. Entries where `mask` is `false` are excluded and get
    /// probability zero; every row must keep at least one entry.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Array2<bool>>) -> Var {
        let src = self.value(x);
        let mut value = src.clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[[i, j]]);
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| keep(j))
                .map(|(_, &z)| z)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, z) in row.iter_mut().enumerate() {
                *z = if keep(j) { (*z - max).exp() } else { 0.0 };
                total += *z;
            }
            row.mapv_inplace(|z| z / total);
        }
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|z| z - lse);
        }
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_FLOOR);
            row.mapv_inplace(|z| z / n);
        }
        let rg = self.rg(x);
        self.push(value, Op::NormalizeRows(x), rg)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mu = row.sum() / n;
            let var = row.iter().map(|&z| (z - mu) * (z - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|z| (z - mu) * inv);
        }
        let rg = self.rg(x);
        self.push(value, Op::LayerNorm(x, eps), rg)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).mapv(|z| z.max(floor));
        let rg = self.rg(x);
        self.push(value, Op::ClampMin(x, floor), rg)
    }

    /// Multi-head scaled dot-product self-attention applied independently to
    /// each segment. `q`, `k`, `v` are stacked `rows × width` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segs: &Segments, heads: usize) -> Var {
        let (rows, width) = self.shape(q);
        assert_eq!(width % heads, 0, "width must divide into heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut out = Mat::zeros((rows, width));
        let mut probs = Vec::with_capacity(segs.len() * heads);
        for &(start, len) in segs.iter() {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qm.slice(s![start..start + len, cols.clone()]);
                let ks = km.slice(s![start..start + len, cols.clone()]);
                let vs = vm.slice(s![start..start + len, cols.clone()]);
                let mut p = qs.dot(&ks.t()) * scale;
                for mut row in p.rows_mut() {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|z| (z - max).exp());
                    let total = row.sum();
                    row.mapv_inplace(|z| z / total);
                }
                out.slice_mut(s![start..start + len, cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segs: segs.clone(),
                heads,
                probs,
            },
            rg,
        )
    }

    /// Gradients of the `1×1` node `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Grads { grads };
        }
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, dy: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, dy.dot(&self.value(b).t()));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, self.value(a).t().dot(dy));
                }
            }
            &Op::MatMulT(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, dy.dot(self.value(b)));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, dy.t().dot(self.value(a)));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, -dy);
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, dy * self.value(b));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, dy * self.value(a));
                }
            }
            &Op::AddRow(x, row) => {
                self.accumulate(grads, x, dy.clone());
                if self.rg(row) {
                    self.accumulate(grads, row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::MulRow(x, row) => {
                if self.rg(x) {
                    self.accumulate(grads, x, dy * self.value(row));
                }
                if self.rg(row) {
                    let g = (dy * self.value(x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, row, g);
                }
            }
            &Op::MulCol(x, col) => {
                if self.rg(x) {
                    self.accumulate(grads, x, dy * self.value(col));
                }
                if self.rg(col) {
                    let g = (dy * self.value(x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, col, g);
                }
            }
            &Op::MulScalar(x, sc) => {
                if self.rg(x) {
                    self.accumulate(grads, x, dy * self.scalar(sc));
                }
                if self.rg(sc) {
                    let g = (dy * self.value(x)).sum();
                    self.accumulate(grads, sc, Mat::from_elem((1, 1), g));
                }
            }
            &Op::Scale(x, c) => self.accumulate(grads, x, dy * c),
            &Op::AddConst(x) => self.accumulate(grads, x, dy.clone()),
            &Op::Gelu(x) => {
                let mut g = self.value(x).mapv(|z| {
                    let u = GELU_C * (z + 0.044715 * z * z * z);
                    let t = u.tanh();
                    0.5 * (1.0 + t)
                        + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
                });
                g *= dy;
                self.accumulate(grads, x, g);
            }
            &Op::Tanh(x) => {
                let g = Zip::from(dy).and(y).map_collect(|&d, &t| d * (1.0 - t * t));
                self.accumulate(grads, x, g);
            }
            &Op::Transpose(x) => self.accumulate(grads, x, dy.t().to_owned()),
            &Op::Reshape(x) => {
                let (r, c) = self.shape(x);
                let flat: Vec<f64> = dy.iter().copied().collect();
                self.accumulate(grads, x, Mat::from_shape_vec((r, c), flat).unwrap());
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    if self.rg(p) {
                        self.accumulate(grads, p, dy.slice(s![at..at + r, ..]).to_owned());
                    }
                    at += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    if self.rg(p) {
                        self.accumulate(grads, p, dy.slice(s![.., at..at + c]).to_owned());
                    }
                    at += c;
                }
            }
            &Op::SliceCols(x, start) => {
                let mut g = Mat::zeros(self.shape(x));
                g.slice_mut(s![.., start..start + dy.ncols()]).assign(dy);
                self.accumulate(grads, x, g);
            }
            Op::GatherRows(x, idx) => {
                let mut g = Mat::zeros(self.shape(*x));
                for (i, &j) in idx.iter().enumerate() {
                    let mut row = g.row_mut(j);
                    row += &dy.row(i);
                }
                self.accumulate(grads, *x, g);
            }
            Op::PickPerRow(x, idx) => {
                let mut g = Mat::zeros(self.shape(*x));
                for (i, &j) in idx.iter().enumerate() {
                    g[[i, j]] += dy[[i, 0]];
                }
                self.accumulate(grads, *x, g);
            }
            &Op::Diag(x) => {
                let mut g = Mat::zeros(self.shape(x));
                for i in 0..dy.nrows() {
                    g[[i, i]] = dy[[i, 0]];
                }
                self.accumulate(grads, x, g);
            }
            &Op::SumAll(x) => {
                self.accumulate(grads, x, Mat::from_elem(self.shape(x), dy[[0, 0]]));
            }
            &Op::MeanAll(x) => {
                let (r, c) = self.shape(x);
                let g = Mat::from_elem((r, c), dy[[0, 0]] / (r * c) as f64);
                self.accumulate(grads, x, g);
            }
            &Op::RowSum(x) => {
                let (r, c) = self.shape(x);
                let g = Mat::from_shape_fn((r, c), |(i, _)| dy[[i, 0]]);
                self.accumulate(grads, x, g);
            }
            &Op::RowMean(x) => {
                let (r, c) = self.shape(x);
                let g = Mat::from_shape_fn((r, c), |(i, _)| dy[[i, 0]] / c as f64);
                self.accumulate(grads, x, g);
            }
            Op::SegmentMean(x, segs) => {
                let mut g = Mat::zeros(self.shape(*x));
                for (i, &(start, len)) in segs.iter().enumerate() {
                    let share = dy.row(i).mapv(|d| d / len as f64);
                    for r in start..start + len {
                        g.row_mut(r).assign(&share);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::ExpandSegments(x, segs) => {
                let mut g = Mat::zeros(self.shape(*x));
                for (i, &(start, len)) in segs.iter().enumerate() {
                    let total = dy.slice(s![start..start + len, ..]).sum_axis(Axis(0));
                    g.row_mut(i).assign(&total);
                }
                self.accumulate(grads, *x, g);
            }
            &Op::Softmax(x) => {
                let dot = (dy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let g = y * &(dy - &dot);
                self.accumulate(grads, x, g);
            }
            &Op::LogSoftmax(x) => {
                let total = dy.sum_axis(Axis(1)).insert_axis(Axis(1));
                let g = dy - &(y.mapv(f64::exp) * &total);
                self.accumulate(grads, x, g);
            }
            &Op::NormalizeRows(x) => {
                let src = self.value(x);
                let mut g = Mat::zeros(src.dim());
                for i in 0..src.nrows() {
                    let n = src.row(i).dot(&src.row(i)).sqrt().max(NORM_FLOOR);
                    let yr = y.row(i);
                    let proj = yr.dot(&dy.row(i));
                    let gi = (&dy.row(i) - &(&yr * proj)) / n;
                    g.row_mut(i).assign(&gi);
                }
                self.accumulate(grads, x, g);
            }
            &Op::LayerNorm(x, eps) => {
                let src = self.value(x);
                let c = src.ncols() as f64;
                let mut g = Mat::zeros(src.dim());
                for i in 0..src.nrows() {
                    let row = src.row(i);
                    let mu = row.sum() / c;
                    let var = row.iter().map(|&z| (z - mu) * (z - mu)).sum::<f64>() / c;
                    let inv = 1.0 / (var + eps).sqrt();
                    let yr = y.row(i);
                    let dr = dy.row(i);
                    let mean_d = dr.sum() / c;
                    let mean_dy = dr.dot(&yr) / c;
                    let gi = (&dr - mean_d - &(&yr * mean_dy)) * inv;
                    g.row_mut(i).assign(&gi);
                }
                self.accumulate(grads, x, g);
            }
            &Op::ClampMin(x, floor) => {
                let g = Zip::from(dy)
                    .and(self.value(x))
                    .map_collect(|&d, &z| if z > floor { d } else { 0.0 });
                self.accumulate(grads, x, g);
            }
            Op::Attention {
                q,
                k,
                v,
                segs,
                heads,
                probs,
            } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (rows, width) = self.shape(q);
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
                let mut dq = Mat::zeros((rows, width));
                let mut dk = Mat::zeros((rows, width));
                let mut dv = Mat::zeros((rows, width));
                let mut pi = 0;
                for &(start, len) in segs.iter() {
                    for h in 0..heads {
                        let rs = start..start + len;
                        let cols = h * dh..(h + 1) * dh;
                        let p = &probs[pi];
                        pi += 1;
                        let dout = dy.slice(s![rs.clone(), cols.clone()]);
                        let qs = qm.slice(s![rs.clone(), cols.clone()]);
                        let ks = km.slice(s![rs.clone(), cols.clone()]);
                        let vs = vm.slice(s![rs.clone(), cols.clone()]);
                        dv.slice_mut(s![rs.clone(), cols.clone()])
                            .assign(&p.t().dot(&dout));
                        let dp = dout.dot(&vs.t());
                        let dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let ds = p * &(&dp - &dot) * scale;
                        dq.slice_mut(s![rs.clone(), cols.clone()])
                            .assign(&ds.dot(&ks));
                        dk.slice_mut(s![rs, cols]).assign(&ds.t().dot(&qs));
                    }
                }
                self.accumulate(grads, q, dq);
                self.accumulate(grads, k, dk);
                self.accumulate(grads, v, dv);
            }
        }
    }
}
