//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix; scalars are `1 x 1`. The tape is rebuilt for
//! each forward pass and discarded after `backward`.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::metrics::{self, DistanceKind, SmoothMinConfig};
use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Norm floor for cosine distances inside the graph.
const NORM_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Rows(Var, usize),
    Sum(Var),
    CosineDistance(Var, Var),
    EuclideanDistance(Var, Var),
    /// Sparse Jacobian: per output cell, the input cells and weights it reads.
    Routed(Var, Vec<Vec<(usize, usize, f64)>>),
    /// Scalar output with a dense local gradient w.r.t. the input.
    ScalarJacobian(Var, Mat),
    Stack(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x C row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a 1 x C row");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in v.rows_mut() {
            let mean = row.mean().unwrap_or(0.0);
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<f64>() / row.len() as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|z| (z - mean) * is);
            inv_std.push(is);
        }
        self.push(v, Op::LayerNorm(a, inv_std))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Column means, `1 x C`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// Column maxima, `1 x C`.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut arg = Vec::with_capacity(x.ncols());
        let mut v = Mat::zeros((1, x.ncols()));
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let mut best = 0;
            for (i, &z) in col.iter().enumerate() {
                if z > col[best] {
                    best = i;
                }
            }
            arg.push(best);
            v[[0, j]] = col[best];
        }
        self.push(v, Op::MaxRows(a, arg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::Rows(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Pairwise `1 - cos` between rows of `a` and rows of `b`.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Var {
        let (an, _) = normalize_rows(self.value(a));
        let (bn, _) = normalize_rows(self.value(b));
        let v = an.dot(&bn.t()).mapv(|c| 1.0 - c);
        self.push(v, Op::CosineDistance(a, b))
    }

    /// Pairwise Euclidean distance between rows of `a` and rows of `b`.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Var {
        let x = self.value(a);
        let y = self.value(b);
        let mut v = Mat::zeros((x.nrows(), y.nrows()));
        for (i, ra) in x.outer_iter().enumerate() {
            for (j, rb) in y.outer_iter().enumerate() {
                let d2: f64 = ra
                    .iter()
                    .zip(rb.iter())
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                v[[i, j]] = (d2 + NORM_EPS).sqrt();
            }
        }
        self.push(v, Op::EuclideanDistance(a, b))
    }

    pub fn pairwise_distance(&mut self, a: Var, b: Var, kind: DistanceKind) -> Var {
        match kind {
            DistanceKind::Cosine => self.cosine_distance(a, b),
            DistanceKind::Euclidean => self.euclidean_distance(a, b),
        }
    }

    /// `tq x ts` mean Hausdorff matrix from a flattened `(tq*nq) x (ts*ns)`
    /// prototype distance matrix.
    pub fn block_hausdorff(
        &mut self,
        flat: Var,
        q: (usize, usize),
        s: (usize, usize),
        normalize: bool,
    ) -> Var {
        let (v, routes) =
            metrics::block_hausdorff_with_routes(self.value(flat).view(), q, s, normalize);
        self.push(v, Op::Routed(flat, routes))
    }

    /// Mean of row minima plus mean of column minima, as a scalar.
    pub fn bidirectional_min(&mut self, d: Var) -> Var {
        let (v, g) = metrics::bidirectional_min_with_grad(self.value(d).view(), true);
        self.push(Mat::from_elem((1, 1), v), Op::ScalarJacobian(d, g))
    }

    pub fn otam(&mut self, d: Var, cfg: SmoothMinConfig) -> Var {
        let (v, g) =
            metrics::otam_with_grad(self.value(d).view(), cfg).expect("validated smoothing config");
        self.push(Mat::from_elem((1, 1), v), Op::ScalarJacobian(d, g))
    }

    /// Stacks `rows * cols` scalar nodes into a matrix (row-major).
    pub fn stack(&mut self, scalars: &[Var], rows: usize, cols: usize) -> Var {
        assert_eq!(scalars.len(), rows * cols);
        let v = Mat::from_shape_fn((rows, cols), |(i, j)| self.scalar(scalars[i * cols + j]));
        self.push(v, Op::Stack(scalars.to_vec()))
    }

    /// Mean softmax cross-entropy of `logits` (`n x M`) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (loss, grad) = cross_entropy_with_grad(self.value(logits), labels);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::ScalarJacobian(logits, grad),
        )
    }

    /// Reverse sweep from scalar `out`; returns the gradient of every node.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Mat::ones(self.value(out).raw_dim()));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            let node = &self.nodes[idx];
            let acc = |v: Var, d: Mat, grads: &mut Vec<Option<Mat>>| match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()), &mut grads);
                    acc(*b, self.value(*a).t().dot(&g), &mut grads);
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.dot(self.value(*b)), &mut grads);
                    acc(*b, g.t().dot(self.value(*a)), &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::MulRow(a, row) => {
                    let dr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*a, &g * self.value(*row), &mut grads);
                    acc(*row, dr, &mut grads);
                }
                Op::Scale(a, k) => acc(*a, g * *k, &mut grads),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    let dots = d.sum_axis(Axis(1));
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        row.scaled_add(-dots[i], &y.row(i));
                    }
                    acc(*a, d, &mut grads);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let c = y.ncols() as f64;
                    let mut d = Mat::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let mg = gr.sum() / c;
                        let mgy = gr.dot(&yr) / c;
                        for j in 0..y.ncols() {
                            d[[i, j]] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Gelu(a) => {
                    let d = &g * &self.value(*a).mapv(gelu_grad);
                    acc(*a, d, &mut grads);
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let d = Mat::from_shape_fn((n, g.ncols()), |(_, j)| g[[0, j]] / n as f64);
                    acc(*a, d, &mut grads);
                }
                Op::MaxRows(a, arg) => {
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    for (j, &i) in arg.iter().enumerate() {
                        d[[i, j]] = g[[0, j]];
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(p, g.slice(s![start..start + n, ..]).to_owned(), &mut grads);
                        start += n;
                    }
                }
                Op::Rows(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let d = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    acc(*a, d, &mut grads);
                }
                Op::CosineDistance(a, b) => {
                    let (an, na) = normalize_rows(self.value(*a));
                    let (bn, nb) = normalize_rows(self.value(*b));
                    let cos = an.dot(&bn.t());
                    let gc = &g * &cos;
                    let row_w = gc.sum_axis(Axis(1));
                    let col_w = gc.sum_axis(Axis(0));
                    // d(1 - cos)/da_i = -(b̂ - cos â_i) / |a_i|
                    let mut da = g.dot(&bn);
                    for i in 0..da.nrows() {
                        let mut r = da.row_mut(i);
                        r.scaled_add(-row_w[i], &an.row(i));
                        r *= -1.0 / na[i];
                    }
                    let mut db = g.t().dot(&an);
                    for j in 0..db.nrows() {
                        let mut r = db.row_mut(j);
                        r.scaled_add(-col_w[j], &bn.row(j));
                        r *= -1.0 / nb[j];
                    }
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::EuclideanDistance(a, b) => {
                    let x = self.value(*a);
                    let y = self.value(*b);
                    let dist = &node.value;
                    let mut da = Mat::zeros(x.raw_dim());
                    let mut db = Mat::zeros(y.raw_dim());
                    for i in 0..x.nrows() {
                        for j in 0..y.nrows() {
                            let w = g[[i, j]] / dist[[i, j]];
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..x.ncols() {
                                let diff = w * (x[[i, k]] - y[[j, k]]);
                                da[[i, k]] += diff;
                                db[[j, k]] -= diff;
                            }
                        }
                    }
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Routed(a, routes) => {
                    let cols = node.value.ncols();
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    for (cell, route) in routes.iter().enumerate() {
                        let go = g[[cell / cols, cell % cols]];
                        for &(r, c, w) in route {
                            d[[r, c]] += go * w;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ScalarJacobian(a, jac) => acc(*a, jac * g[[0, 0]], &mut grads),
                Op::Stack(scalars) => {
                    let cols = g.ncols();
                    for (k, &sv) in scalars.iter().enumerate() {
                        acc(
                            sv,
                            Mat::from_elem((1, 1), g[[k / cols, k % cols]]),
                            &mut grads,
                        );
                    }
                }
            }
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter bound on the graph that the output depends on.
    pub fn params(&self) -> Vec<(ParamId, &Mat)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.of(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn normalize_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(NORM_EPS);
        row /= n;
        norms.push(n);
    }
    (out, norms)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy_with_grad(logits: &Mat, labels: &[usize]) -> (f64, Mat) {
    let n = logits.nrows();
    assert_eq!(n, labels.len(), "one label per query");
    let mut grad = Mat::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[labels[i]];
        for (j, &x) in row.iter().enumerate() {
            grad[[i, j]] = (x - lse).exp() / n as f64;
        }
        grad[[i, labels[i]]] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad)
}
