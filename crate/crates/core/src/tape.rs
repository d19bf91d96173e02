//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is a Wengert list: every differentiable operation appends a
//! node holding its forward value and the handles of its inputs. Calling
//! [`Tape::backward`] walks the list in reverse and accumulates adjoints for
//! every node that is reachable from the seed and marked `requires_grad`.
//!
//! The op set is deliberately narrow: it covers what the transformer,
//! the token scorer, the pruning masks and the training losses need, and
//! nothing else. There is no broadcasting beyond row-bias addition.
//!
//! A tape belongs to one forward/backward pass on one thread. Leaves can
//! share storage with long-lived weights through [`Tape::shared_leaf`], so a
//! per-sample tape does not have to copy the model.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{self, moments, sigmoid, sigmoid_grad, softmax_in_place, Tensor};

/// Additive logit bias applied to masked keys.
pub const MASK_BIAS: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which way round a KL divergence is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`, the usual distillation objective.
    #[default]
    TeacherStudent,
    /// `KL(student ‖ teacher)`.
    StudentTeacher,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Detach,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    ScaleRows { x: Var, s: Var, offset: usize },
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaskedSoftmax { x: Var, mask: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Slice { x: Var, rows: Range<usize>, cols: Range<usize> },
    Concat { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Reshape(Var),
    SumAll(Var),
    ColSum(Var),
    L2NormRows(Var),
    NormalizeCols(Var),
    SoftThreshold { s: Var, theta: Var, temperature: T },
    Ste { s: Var, theta: Var, temperature: T },
    CrossEntropy { logits: Var, label: usize },
    KlDiv { student: Var, teacher: Tensor<T>, direction: KlDirection },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by a backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn require_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return shape_err(op, a, b);
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.shared_leaf(Arc::new(value), requires_grad)
    }

    /// Leaf whose storage is shared with the caller (no copy).
    pub fn shared_leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Same value, but no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Detach,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    /// `a·bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(y, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let y = self.value(x).add_row_bias(self.value(b))?;
        Ok(self.push(y, Op::AddRowBias(x, b), &[x, b]))
    }

    /// `x·W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row_bias(h, b)
    }

    /// Multiplies row `offset + j` of the matrix `x` by `s[j]`; rows before
    /// `offset` pass through unchanged.
    pub fn scale_rows(&mut self, x: Var, s: Var, offset: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, _) = xv.dims2()?;
        let sv = self.value(s);
        if sv.len() + offset != rows {
            return shape_err("scale_rows", xv.shape(), sv.shape());
        }
        let mut y = xv.clone();
        for (j, &f) in sv.data().iter().enumerate() {
            y.row_mut(offset + j).iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(y, Op::ScaleRows { x, s, offset }, &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).scale(c);
        self.push(y, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddScalar(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).map(T::abs);
        self.push(y, Op::Abs(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).gelu();
        self.push(y, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).sigmoid();
        self.push(y, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = self.value(x).softmax_lastdim();
        self.push(y, Op::Softmax(x), &[x])
    }

    /// Row softmax of an `[n, n]` attention-logit matrix where key column
    /// `j + 1` is weighted by `mask[j]` and column 0 (the class token) is
    /// always kept.
    ///
    /// A zero mask entry adds [`MASK_BIAS`] to the column; a positive entry
    /// adds `ln(mask)`, i.e. scales the column's exponential. For binary
    /// masks the forward value is the additively masked softmax, and the
    /// gradient with respect to the mask is that of the exponential
    /// weighting, which stays finite.
    pub fn masked_softmax(&mut self, x: Var, mask: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        let mv = self.value(mask);
        if mv.len() + 1 != cols {
            return shape_err("masked_softmax", xv.shape(), mv.shape());
        }
        let bias = column_bias(mv.data());
        let mut y = xv.clone();
        for r in 0..rows {
            let row = y.row_mut(r);
            row.iter_mut().zip(&bias).for_each(|(v, &b)| *v += b);
            softmax_in_place(row);
        }
        Ok(self.push(y, Op::MaskedSoftmax { x, mask }, &[x, mask]))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let y = self
            .value(x)
            .layernorm(self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta]))
    }

    /// Rectangular block of a matrix.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return shape_err("slice", xv.shape(), &[rows.end, cols.end]);
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&xv.row(i)[cols.clone()]);
        }
        let y = Tensor::new([rows.len(), cols.len()], data)?;
        Ok(self.push(y, Op::Slice { x, rows, cols }, &[x]))
    }

    /// Concatenates along the leading axis. Rank-1 parts of equal length
    /// are stacked into a matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let stacking = first.len() == 1;
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let ok = if stacking {
                pv.shape() == &first[..]
            } else {
                pv.rank() == first.len() && pv.shape()[1..] == first[1..]
            };
            if !ok {
                return shape_err("concat_rows", &first, pv.shape());
            }
            lead += if stacking { 1 } else { pv.shape()[0] };
            data.extend_from_slice(pv.data());
        }
        let shape: Vec<usize> = if stacking {
            vec![parts.len(), first[0]]
        } else {
            std::iter::once(lead).chain(first[1..].iter().copied()).collect()
        };
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_cols(&refs)?;
        Ok(self.push(y, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / lit(n as f64))
    }

    /// Column sums of an `[h, n]` matrix.
    pub fn col_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (h, n) = xv.dims2()?;
        let mut out = vec![T::zero(); n];
        for r in 0..h {
            out.iter_mut().zip(xv.row(r)).for_each(|(o, &v)| *o += v);
        }
        Ok(self.push(Tensor::vector(out), Op::ColSum(x), &[x]))
    }

    /// Euclidean norm of each row of a matrix.
    pub fn l2norm_rows(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims2()?;
        let y = self.value(x).l2norm_lastdim();
        Ok(self.push(y, Op::L2NormRows(x), &[x]))
    }

    /// Divides every column of a nonnegative `[h, n]` matrix by its sum.
    /// An all-zero column becomes uniform `1/h` and passes no gradient.
    pub fn normalize_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (h, n) = xv.dims2()?;
        let y = normalize_columns(xv, h, n);
        Ok(self.push(y, Op::NormalizeCols(x), &[x]))
    }

    /// `sigmoid(T·(s − θ))` for a score vector `s` and a one-element `θ`.
    pub fn soft_threshold(&mut self, s: Var, theta: Var, temperature: T) -> Result<Var> {
        self.check_theta(theta)?;
        let th = self.value(theta).data()[0];
        let y = self.value(s).map(|v| sigmoid(temperature * (v - th)));
        Ok(self.push(y, Op::SoftThreshold { s, theta, temperature }, &[s, theta]))
    }

    /// Straight-through threshold: the forward value is the binary mask
    /// `s > θ`, the backward pass uses the derivative of
    /// `sigmoid(T·(s − θ))`.
    pub fn ste_threshold(&mut self, s: Var, theta: Var, temperature: T) -> Result<Var> {
        self.check_theta(theta)?;
        let th = self.value(theta).data()[0];
        let y = self
            .value(s)
            .map(|v| if v > th { T::one() } else { T::zero() });
        Ok(self.push(y, Op::Ste { s, theta, temperature }, &[s, theta]))
    }

    fn check_theta(&self, theta: Var) -> Result<()> {
        if self.value(theta).len() != 1 {
            return shape_err("threshold", self.value(theta).shape(), &[1]);
        }
        Ok(())
    }

    /// Softmax cross-entropy of a logit vector against a class label.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if label >= z.len() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let loss = log_sum_exp(z.data()) - z.data()[label];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label }, &[logits]))
    }

    /// KL divergence between the softmax of `student` logits and the
    /// softmax of constant `teacher` logits. The teacher never receives
    /// gradient.
    pub fn kl_div(&mut self, student: Var, teacher: &Tensor<T>, direction: KlDirection) -> Result<Var> {
        let zs = self.value(student);
        require_same("kl_div", zs.shape(), teacher.shape())?;
        let value = kl_value(zs.data(), teacher.data(), direction);
        let op = Op::KlDiv {
            student,
            teacher: teacher.clone(),
            direction,
        };
        Ok(self.push(Tensor::scalar(value), op, &[student]))
    }

    /// Backward pass from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", self.value(loss).shape(), &[1]);
        }
        self.backward_seeded(&[(loss, T::one())])
    }

    /// Backward pass from `Σ cᵢ·outᵢ` over single-element outputs.
    pub fn backward_seeded(&self, seeds: &[(Var, T)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for &(v, c) in seeds {
            let shape = self.value(v).shape().to_vec();
            accumulate(&mut grads, v, Tensor::full(shape, c));
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let n = g.last_dim();
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    let shape = self.value(*b).shape().to_vec();
                    accumulate(grads, *b, Tensor::new(shape, db)?);
                }
            }
            Op::ScaleRows { x, s, offset } => {
                let sv = self.value(*s);
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for (j, &f) in sv.data().iter().enumerate() {
                        dx.row_mut(offset + j).iter_mut().for_each(|v| *v *= f);
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*s) {
                    let xv = self.value(*x);
                    let ds = (0..sv.len())
                        .map(|j| {
                            let r = offset + j;
                            g.row(r).iter().zip(xv.row(r)).map(|(&a, &b)| a * b).sum()
                        })
                        .collect();
                    accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), ds)?);
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.scale(*c)),
            Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
            Op::Abs(x) => {
                let xv = self.value(*x);
                let dx = elementwise(g, xv, |gv, v| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = elementwise(g, self.value(*x), |gv, v| gv * tensor::gelu_grad(v));
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = elementwise(g, self.value(*x), |gv, v| gv * sigmoid_grad(v));
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => accumulate(grads, *x, softmax_backward(y, g)),
            Op::MaskedSoftmax { x, mask } => {
                if self.wants(*x) {
                    accumulate(grads, *x, softmax_backward(y, g));
                }
                if self.wants(*mask) {
                    let dm = masked_softmax_mask_grad(self.value(*x), self.value(*mask), y, g)?;
                    accumulate(grads, *mask, dm);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.layernorm_backward(*x, *gamma, *beta, *eps, g, grads)?;
            }
            Op::Slice { x, rows, cols } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (k, r) in rows.clone().enumerate() {
                    dx.row_mut(r)[cols.clone()].copy_from_slice(g.row(k));
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { parts } => {
                let mut at = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.len();
                    if self.wants(p) {
                        let part = Tensor::new(pv.shape().to_vec(), g.data()[at..at + len].to_vec())?;
                        accumulate(grads, p, part);
                    }
                    at += len;
                }
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if self.wants(p) {
                        accumulate(grads, p, g.slice_cols(at, at + w)?);
                    }
                    at += w;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, g.clone().reshape(shape)?);
            }
            Op::SumAll(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(shape, g.data()[0]));
            }
            Op::ColSum(x) => {
                let (h, n) = self.value(*x).dims2()?;
                let dx = Tensor::from_fn([h, n], |i| g.data()[i % n]);
                accumulate(grads, *x, dx);
            }
            Op::L2NormRows(x) => {
                let xv = self.value(*x);
                let (m, d) = xv.dims2()?;
                let mut dx = Tensor::zeros([m, d]);
                for r in 0..m {
                    let norm = y.data()[r];
                    if norm > T::zero() {
                        let f = g.data()[r] / norm;
                        dx.row_mut(r)
                            .iter_mut()
                            .zip(xv.row(r))
                            .for_each(|(o, &v)| *o = f * v);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::NormalizeCols(x) => {
                let xv = self.value(*x);
                let (h, n) = xv.dims2()?;
                let mut dx = Tensor::zeros([h, n]);
                for j in 0..n {
                    let total: T = (0..h).map(|r| xv.at2(r, j)).sum();
                    if total == T::zero() {
                        continue;
                    }
                    let dot: T = (0..h).map(|r| g.at2(r, j) * y.at2(r, j)).sum();
                    for r in 0..h {
                        dx.data_mut()[r * n + j] = (g.at2(r, j) - dot) / total;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SoftThreshold { s, theta, temperature } | Op::Ste { s, theta, temperature } => {
                let th = self.value(*theta).data()[0];
                let t = *temperature;
                let sv = self.value(*s);
                let ds = elementwise(g, sv, |gv, v| gv * t * sigmoid_grad(t * (v - th)));
                if self.wants(*theta) {
                    accumulate(grads, *theta, Tensor::scalar(-ds.sum()));
                }
                if self.wants(*s) {
                    accumulate(grads, *s, ds);
                }
            }
            Op::CrossEntropy { logits, label } => {
                let zv = self.value(*logits);
                let mut p = zv.softmax_lastdim();
                p.data_mut()[*label] -= T::one();
                accumulate(grads, *logits, p.scale(g.data()[0]));
            }
            Op::KlDiv { student, teacher, direction } => {
                let zs = self.value(*student);
                let d = kl_student_grad(zs.data(), teacher.data(), *direction);
                let dz = Tensor::new(zs.shape().to_vec(), d)?.scale(g.data()[0]);
                accumulate(grads, *student, dz);
            }
        }
        Ok(())
    }

    fn layernorm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let gam = self.value(gamma).data();
        let d = xv.last_dim();
        let dn: T = lit(d as f64);
        let mut dx = Tensor::zeros(xv.shape().to_vec());
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let mut xhat = vec![T::zero(); d];
        let mut gx = vec![T::zero(); d];
        for r in 0..xv.len() / d.max(1) {
            let row = xv.row(r);
            let grow = g.row(r);
            let (mean, rstd) = moments(row, eps);
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for c in 0..d {
                xhat[c] = (row[c] - mean) * rstd;
                gx[c] = grow[c] * gam[c];
                m1 += gx[c];
                m2 += gx[c] * xhat[c];
                dgamma[c] += grow[c] * xhat[c];
                dbeta[c] += grow[c];
            }
            m1 /= dn;
            m2 /= dn;
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = rstd * (gx[c] - m1 - xhat[c] * m2);
            }
        }
        if self.wants(x) {
            accumulate(grads, x, dx);
        }
        if self.wants(gamma) {
            let shape = self.value(gamma).shape().to_vec();
            accumulate(grads, gamma, Tensor::new(shape, dgamma)?);
        }
        if self.wants(beta) {
            let shape = self.value(beta).shape().to_vec();
            accumulate(grads, beta, Tensor::new(shape, dbeta)?);
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .add_assign(&g)
            .expect("gradient shape matches its node"),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let n = y.last_dim();
    let mut dx = y.clone();
    for (dr, gr) in dx.data_mut().chunks_mut(n).zip(g.data().chunks(n)) {
        let dot: T = dr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dr.iter_mut().zip(gr).for_each(|(d, &gv)| *d *= gv - dot);
    }
    dx
}

/// Per-column additive bias for a masked softmax: column 0 is the class
/// token and is never masked.
pub(crate) fn column_bias<T: Scalar>(mask: &[T]) -> Vec<T> {
    std::iter::once(T::zero())
        .chain(mask.iter().map(|&m| {
            if m > T::zero() {
                m.ln()
            } else {
                lit(MASK_BIAS)
            }
        }))
        .collect()
}

fn masked_softmax_mask_grad<T: Scalar>(
    x: &Tensor<T>,
    mask: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2()?;
    let bias = column_bias(mask.data());
    let kept = |c: usize| c == 0 || mask.data()[c - 1] > T::zero();
    let clamp: T = lit(tensor::SIGMOID_CLAMP);
    let mut dm = vec![T::zero(); cols - 1];
    for r in 0..rows {
        let xr = x.row(r);
        let max = (0..cols)
            .filter(|&c| kept(c))
            .map(|c| xr[c] + bias[c])
            .fold(T::neg_infinity(), T::max);
        let z: T = (0..cols)
            .filter(|&c| kept(c))
            .map(|c| (xr[c] + bias[c] - max).exp())
            .sum();
        let gr = g.row(r);
        let dot: T = y.row(r).iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for c in 1..cols {
            let w = (xr[c] - max).min(clamp).exp() / z;
            dm[c - 1] += w * (gr[c] - dot);
        }
    }
    Tensor::new(mask.shape().to_vec(), dm)
}

pub(crate) fn normalize_columns<T: Scalar>(x: &Tensor<T>, h: usize, n: usize) -> Tensor<T> {
    let mut y = x.clone();
    let uniform = T::one() / lit(h as f64);
    for j in 0..n {
        let total: T = (0..h).map(|r| x.at2(r, j)).sum();
        for r in 0..h {
            y.data_mut()[r * n + j] = if total == T::zero() {
                uniform
            } else {
                x.at2(r, j) / total
            };
        }
    }
    y
}

pub(crate) fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let lse = log_sum_exp(z);
    z.iter().map(|&v| v - lse).collect()
}

pub(crate) fn kl_value<T: Scalar>(student: &[T], teacher: &[T], direction: KlDirection) -> T {
    let ls = log_softmax(student);
    let lt = log_softmax(teacher);
    let (lp, lq) = match direction {
        KlDirection::TeacherStudent => (&lt, &ls),
        KlDirection::StudentTeacher => (&ls, &lt),
    };
    lp.iter()
        .zip(lq)
        .map(|(&a, &b)| a.exp() * (a - b))
        .sum::<T>()
        .max(T::zero())
}

fn kl_student_grad<T: Scalar>(student: &[T], teacher: &[T], direction: KlDirection) -> Vec<T> {
    let ls = log_softmax(student);
    let lt = log_softmax(teacher);
    let ps: Vec<T> = ls.iter().map(|v| v.exp()).collect();
    match direction {
        KlDirection::TeacherStudent => ps.iter().zip(&lt).map(|(&p, &l)| p - l.exp()).collect(),
        KlDirection::StudentTeacher => {
            let a: Vec<T> = ls.iter().zip(&lt).map(|(&s, &t)| s - t).collect();
            let mean: T = ps.iter().zip(&a).map(|(&p, &v)| p * v).sum();
            ps.iter().zip(&a).map(|(&p, &v)| p * (v - mean)).collect()
        }
    }
}
