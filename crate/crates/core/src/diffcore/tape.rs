//! Reverse-mode differentiation over dense matrices.
//!
//! Every primitive evaluates eagerly and appends a node to the tape. A node
//! keeps its output value plus whatever the backward rule needs. `backward`
//! walks the nodes in exact reverse order and accumulates parameter gradients
//! into a [`ParamStore`].

use std::sync::Arc;

use super::matrix::{CsrMatrix, Matrix};
use super::params::{ParamId, ParamStore};
use crate::error::{Result, SsftError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Relu(Var),
    Sqrt(Var),
    L2NormalizeRows(Var),
    RowNorm(Var),
    Mean(Var),
    Sum(Var),
    ConcatColumns(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowSlice {
        input: Var,
        start: usize,
    },
    Gather {
        input: Var,
        index: Vec<(usize, usize)>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    PairwiseSqDist(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Smallest `|x|` over every input entry of a ReLU or hinge on the tape:
    /// how far the recorded point is from the nearest kink. Finite-difference
    /// checks are only meaningful when this exceeds the perturbation's reach.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a)),
                _ => None,
            })
            .flat_map(|m| m.data().iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Snapshots the current value of a parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    /// Adds a `1 × cols` bias to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row_broadcast(self.value(bias))?;
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a))
    }

    /// Same as [`Tape::relu`]; reads better inside margin losses.
    pub fn hinge(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    /// Elementwise square root of a nonnegative input. The gradient at an
    /// exact zero is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0).sqrt());
        self.push(out, Op::Sqrt(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).l2_normalize_rows(NORM_EPS);
        self.push(out, Op::L2NormalizeRows(a))
    }

    /// Per-row `sqrt(Σx² + ε)` as an `n × 1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = Matrix::from_fn(m.rows(), 1, |i, _| {
            (m.row(i).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt()
        });
        self.push(out, Op::RowNorm(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.data().len().max(1) as f64;
        let out = Matrix::scalar(m.sum() / n);
        self.push(out, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_columns(&mats)?;
        Ok(self.push(out, Op::ConcatColumns(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_rows(&mats)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..start + len`.
    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        if start + len > m.rows() {
            return Err(SsftError::Index {
                op: "row_slice",
                index: start + len,
                bound: m.rows() + 1,
            });
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let out = m.select_rows(&idx);
        Ok(self.push(out, Op::RowSlice { input: a, start }))
    }

    /// Collects the listed `(row, col)` entries into a `k × 1` column.
    pub fn gather(&mut self, a: Var, index: Vec<(usize, usize)>) -> Result<Var> {
        let m = self.value(a);
        let mut data = Vec::with_capacity(index.len());
        for &(r, c) in &index {
            if r >= m.rows() || c >= m.cols() {
                return Err(SsftError::Index {
                    op: "gather",
                    index: if r >= m.rows() { r } else { c },
                    bound: if r >= m.rows() { m.rows() } else { m.cols() },
                });
            }
            data.push(m.get(r, c));
        }
        let out = Matrix::from_vec(index.len(), 1, data)?;
        Ok(self.push(out, Op::Gather { input: a, index }))
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if labels.len() != l.rows() {
            return Err(SsftError::Shape {
                op: "softmax_cross_entropy",
                left: l.shape(),
                right: (labels.len(), 1),
            });
        }
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= l.cols() {
                return Err(SsftError::Index {
                    op: "softmax_cross_entropy",
                    index: y,
                    bound: l.cols(),
                });
            }
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            total += log_denom - (row[y] - max);
            for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
        }
        let n = labels.len().max(1) as f64;
        let out = Matrix::scalar(total / n);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `out[i][j] = ‖a_i − b_j‖²`
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Matrix::pairwise_sq_dist(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::PairwiseSqDist(a, b)))
    }

    /// Constant sparse matrix times a node.
    pub fn spmm(&mut self, s: Arc<CsrMatrix>, a: Var) -> Result<Var> {
        let out = s.matmul_dense(self.value(a))?;
        Ok(self.push(out, Op::SpMM(s, a)))
    }

    /// Reverse pass from a `1 × 1` node. Parameter gradients are added to
    /// whatever the store already holds.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let root = self.value(loss);
        if root.shape() != (1, 1) {
            return Err(SsftError::Shape {
                op: "backward",
                left: root.shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|v| v * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::AddBias(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let ga =
                        g.zip_map(&node.value, "relu", |gv, y| if y > 0.0 { gv } else { 0.0 })?;
                    acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip_map(&node.value, "sqrt", |gv, y| {
                        if y > 0.0 {
                            gv / (2.0 * y)
                        } else {
                            0.0
                        }
                    })?;
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let norm = (x.row(i).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                        let gy: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                            *o = (gv - yv * gy) / norm;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowNorm(a) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let k = g.get(i, 0) / node.value.get(i, 0);
                        for (o, xv) in ga.row_mut(i).iter_mut().zip(x.row(i)) {
                            *o = k * xv;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let n = (r * c).max(1) as f64;
                    acc(&mut grads, *a, Matrix::filled(r, c, g.data()[0] / n));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::ConcatColumns(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = Matrix::from_fn(g.rows(), w, |i, j| g.get(i, offset + j));
                        offset += w;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let idx: Vec<usize> = (offset..offset + h).collect();
                        offset += h;
                        acc(&mut grads, p, g.select_rows(&idx));
                    }
                }
                Op::RowSlice { input, start } => {
                    let (r, c) = self.value(*input).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        ga.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::Gather { input, index } => {
                    let (r, c) = self.value(*input).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &(i, j)) in index.iter().enumerate() {
                        let cur = ga.get(i, j);
                        ga.set(i, j, cur + g.get(k, 0));
                    }
                    acc(&mut grads, *input, ga);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len().max(1) as f64;
                    let scale = g.data()[0] / n;
                    let mut ga = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        let cur = ga.get(i, y);
                        ga.set(i, y, cur - 1.0);
                    }
                    for v in ga.data_mut() {
                        *v *= scale;
                    }
                    acc(&mut grads, *logits, ga);
                }
                Op::PairwiseSqDist(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    // d/da_i = 2 Σ_j g_ij (a_i − b_j), d/db_j = 2 Σ_i g_ij (b_j − a_i)
                    let gb_term = g.matmul(bv)?;
                    let ga_term = g.matmul_tn(av)?;
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        let rs: f64 = g.row(i).iter().sum();
                        for ((o, x), t) in
                            ga.row_mut(i).iter_mut().zip(av.row(i)).zip(gb_term.row(i))
                        {
                            *o = 2.0 * (rs * x - t);
                        }
                    }
                    let mut gbm = Matrix::zeros(bv.rows(), bv.cols());
                    for j in 0..bv.rows() {
                        let cs: f64 = (0..g.rows()).map(|i| g.get(i, j)).sum();
                        for ((o, y), t) in
                            gbm.row_mut(j).iter_mut().zip(bv.row(j)).zip(ga_term.row(j))
                        {
                            *o = 2.0 * (cs * y - t);
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gbm);
                }
                Op::SpMM(s, a) => acc(&mut grads, *a, s.matmul_dense_t(&g)?),
            }
        }
        Ok(())
    }
}

/// Floor added inside every norm.
pub const NORM_EPS: f64 = 1e-12;

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[-1.0, 0.0, 2.0]]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = t.constant(Matrix::from_rows(&[[-1.0, -3.0]]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn kink_margin_is_the_closest_relu_input() {
        let mut t = Tape::new();
        assert_eq!(t.kink_margin(), f64::INFINITY);
        let x = t.constant(Matrix::from_rows(&[[-0.5, 2.0], [0.25, -3.0]]));
        let y = t.relu(x);
        let z = t.scale(y, 0.01);
        t.hinge(z);
        assert_eq!(t.kink_margin(), 0.0);
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[-0.5, 2.0], [0.25, -3.0]]));
        t.relu(x);
        assert_eq!(t.kink_margin(), 0.25);
    }

    #[test]
    fn l2_normalize_rows_forward() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[3.0, 4.0], [0.0, 1.0]]));
        let y = t.l2_normalize_rows(x);
        let v = t.value(y);
        assert!((v.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((v.get(0, 1) - 0.8).abs() < 1e-12);
        assert!((v.get(1, 1) - 1.0).abs() < 1e-12);
        assert_eq!(v.get(1, 0), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::filled(4, 5, 0.7));
        let l = t.softmax_cross_entropy(x, &[0, 1, 2, 4]).unwrap();
        assert!((t.scalar(l) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[1000.0, 0.0, 0.0], [0.0, 0.0, 1000.0]]));
        let l = t.softmax_cross_entropy(x, &[0, 2]).unwrap();
        assert!(t.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(1, 3));
        assert!(matches!(
            t.softmax_cross_entropy(x, &[3]),
            Err(SsftError::Index {
                index: 3,
                bound: 3,
                ..
            })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(2, 2));
        assert!(t.backward(x, &mut ParamStore::new()).is_err());
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_bt() {
        let mut store = ParamStore::new();
        let a = store.insert(
            "a",
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]),
        );
        let bm = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]]);
        let mut t = Tape::new();
        let av = t.param(&store, a);
        let bv = t.constant(bm.clone());
        let p = t.matmul(av, bv).unwrap();
        let s = t.sum(p);
        t.backward(s, &mut store).unwrap();
        let expected = Matrix::filled(3, 3, 1.0).matmul_nt(&bm).unwrap();
        assert_eq!(store.grad(a), &expected);
    }
}
