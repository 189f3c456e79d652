use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, gemm, Tensor};

/// Below this norm, L2 normalization divides by the floor instead.
pub const NORM_FLOOR: f64 = 1e-8;
/// Variance epsilon of the per-sample normalization layer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    Scale(Var, f64),
    Concat(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    Mean(Var),
    Sum(Var),
    PowerNormalize {
        x: Var,
        norms: Vec<f64>,
        budget: f64,
    },
    ComplexGain {
        x: Var,
        gains: Vec<[f64; 2]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Values are computed eagerly as operations are recorded; `backward`
/// replays the recorded operations in reverse. A tape is single-use: one
/// backward pass per tape.
pub struct Tape<'s> {
    nodes: Vec<Node>,
    params: Option<&'s ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    trainable: Option<HashSet<ParamId>>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    vars: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient with respect to a leaf (input, constant or parameter);
    /// zero if the leaf is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.vars[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Euclidean norm of the gradient restricted to `ids`.
    pub fn norm_over(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|id| self.params.get(id))
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }
}

fn out_shape(like: &Tensor, cols: usize) -> Vec<usize> {
    if like.shape().len() == 2 {
        vec![like.rows(), cols]
    } else {
        vec![cols]
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

impl<'s> Tape<'s> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            trainable: None,
            consumed: false,
        }
    }

    /// A tape that can read parameters from `store`. All parameters are
    /// trainable unless restricted with [`Tape::train_only`].
    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            params: Some(store),
            ..Self::new()
        }
    }

    /// Restricts gradient flow to the listed parameters; every other
    /// parameter enters the tape as a constant.
    pub fn train_only(mut self, ids: impl IntoIterator<Item = ParamId>) -> Self {
        self.trainable = Some(ids.into_iter().collect());
        self
    }

    /// Freezes every parameter.
    pub fn frozen(self) -> Self {
        self.train_only(std::iter::empty())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable leaf (e.g. the point of a gradient check).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies a value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same
    /// handle so gradient contributions accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("tape was created without a parameter store");
        let trainable = self.trainable.as_ref().is_none_or(|t| t.contains(&id));
        let v = self.push(store.get(id).clone(), Op::Param(id), trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k as isize, 1), tb.data(), (n as isize, 1), 0.0, &mut out);
        let value = Tensor::new(out_shape(ta, n), out)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.shape().len() != 1 || tb.cols() != tx.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let g = self.grad_of(&[x, b]);
        Ok(self.push(value, Op::AddBias(x, b), g))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let g = self.grad_of(&[x]);
        self.push(value, Op::Relu(x), g)
    }

    /// Per-sample normalization: each row is shifted to zero mean and
    /// scaled to unit variance, then `gamma * x̂ + beta` is applied.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(tg.data()[j] * h + tb.data()[j]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let g = self.grad_of(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Row-wise `x / max(‖x‖, NORM_FLOOR)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(c) {
            let n = dot(row, row).sqrt();
            norms.push(n);
            let d = n.max(NORM_FLOOR);
            out.extend(row.iter().map(|v| v / d));
        }
        let value = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let g = self.grad_of(&[x]);
        self.push(value, Op::L2Normalize { x, norms }, g)
    }

    /// Cosine similarity of paired rows; output has one entry per row.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("cosine", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let c = ta.cols();
        let rows = ta.rows();
        let mut norms_a = Vec::with_capacity(rows);
        let mut norms_b = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for (ra, rb) in ta.data().chunks(c).zip(tb.data().chunks(c)) {
            let (na, nb) = (dot(ra, ra).sqrt(), dot(rb, rb).sqrt());
            out.push(dot(ra, rb) / (na.max(NORM_FLOOR) * nb.max(NORM_FLOOR)));
            norms_a.push(na);
            norms_b.push(nb);
        }
        let value = Tensor::vector(out);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(
            value,
            Op::Cosine {
                a,
                b,
                norms_a,
                norms_b,
            },
            g,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, c) = (tl.rows(), tl.cols());
        if labels.len() != rows {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", tl.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(tl.len());
        let mut loss = 0.0;
        for (row, &label) in tl.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(loss / rows as f64);
        let g = self.grad_of(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Mean over all elements of `(a - b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.zip_same("mse", a, b, |x, y| x - y)?;
        let value = Tensor::scalar(diff.sum_squares() / diff.len() as f64);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), g))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let g = self.grad_of(&[x]);
        self.push(value, Op::Scale(x, factor), g)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.shape().len() != tb.shape().len() {
            return Err(Error::shape("concat", format!("{:?} ++ {:?}", ta.shape(), tb.shape())));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for (ra, rb) in ta.data().chunks(ca).zip(tb.data().chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let value = Tensor::new(out_shape(ta, ca + cb), out)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), g))
    }

    /// Columns `start..start + len` of every row.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} of {:?}", start + len, tx.shape()),
            ));
        }
        let out = tx
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(out_shape(tx, len), out)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Slice { x, start }, g))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let value = Tensor::scalar(tx.data().iter().sum::<f64>() / tx.len() as f64);
        let g = self.grad_of(&[x]);
        self.push(value, Op::Mean(x), g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let g = self.grad_of(&[x]);
        self.push(value, Op::Sum(x), g)
    }

    /// Row-wise projection onto the ball `‖x‖² ≤ budget`:
    /// `x · min(1, √budget / ‖x‖)`. A zero row passes through.
    pub fn power_normalize(&mut self, x: Var, budget: f64) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let radius = budget.sqrt();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(c) {
            let n = dot(row, row).sqrt();
            norms.push(n);
            let factor = if n > radius { radius / n } else { 1.0 };
            out.extend(row.iter().map(|v| v * factor));
        }
        let value = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let g = self.grad_of(&[x]);
        self.push(value, Op::PowerNormalize { x, norms, budget }, g)
    }

    /// Multiplies each row, read as `k` complex symbols stored as
    /// `[re_1..re_k, im_1..im_k]`, by that row's complex gain.
    pub fn complex_gain(&mut self, x: Var, gains: &[[f64; 2]]) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if !c.is_multiple_of(2) || gains.len() != tx.rows() {
            return Err(Error::shape(
                "complex_gain",
                format!("{:?} with {} gains", tx.shape(), gains.len()),
            ));
        }
        let k = c / 2;
        let mut out = Vec::with_capacity(tx.len());
        for (row, &[a, b]) in tx.data().chunks(c).zip(gains) {
            let (re, im) = row.split_at(k);
            out.extend(re.iter().zip(im).map(|(r, i)| a * r - b * i));
            out.extend(re.iter().zip(im).map(|(r, i)| b * r + a * i));
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(
            value,
            Op::ComplexGain {
                x,
                gains: gains.to_vec(),
            },
            g,
        ))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut params = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let want = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g.clone())?;
                    params.insert(*id, t);
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if want(a) {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, (n as isize, 1), tb.data(), (1, n as isize), 0.0, &mut da);
                        accumulate(&mut grads[a.0], da);
                    }
                    if want(b) {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), (1, k as isize), &g, (n as isize, 1), 0.0, &mut db);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::AddBias(x, b) => {
                    if want(b) {
                        let c = self.value(*b).cols();
                        let mut db = vec![0.0; c];
                        for row in g.chunks(c) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                    if want(x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if want(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if want(b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if want(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if want(b) {
                        accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if want(a) {
                        let da = g.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads[a.0], da);
                    }
                    if want(b) {
                        let db = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    let dx = g
                        .iter()
                        .zip(tx.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let tg = self.value(*gamma);
                    let c = tg.cols();
                    if want(gamma) {
                        let mut dg = vec![0.0; c];
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                        accumulate(&mut grads[gamma.0], dg);
                    }
                    if want(beta) {
                        let mut db = vec![0.0; c];
                        for gr in g.chunks(c) {
                            db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                        }
                        accumulate(&mut grads[beta.0], db);
                    }
                    if want(x) {
                        let mut dx = Vec::with_capacity(g.len());
                        let cf = c as f64;
                        for ((gr, hr), is) in g.chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                            let dh: Vec<f64> = gr.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h = dot(&dh, hr);
                            dx.extend(
                                dh.iter()
                                    .zip(hr)
                                    .map(|(d, h)| is / cf * (cf * d - sum_dh - h * sum_dh_h)),
                            );
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, yr), &n) in g.chunks(c).zip(y.data().chunks(c)).zip(norms) {
                        if n >= NORM_FLOOR {
                            let p = dot(yr, gr);
                            dx.extend(gr.iter().zip(yr).map(|(g, y)| (g - y * p) / n));
                        } else {
                            dx.extend(gr.iter().map(|g| g / NORM_FLOOR));
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Cosine {
                    a,
                    b,
                    norms_a,
                    norms_b,
                } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let c = ta.cols();
                    let cos = node.value.data();
                    // d cos / d a = b / (|a||b|) - cos · a / |a|² (the last term only above the floor)
                    let side = |x: &Tensor, other: &Tensor, nx: &[f64], no: &[f64]| {
                        let mut out = Vec::with_capacity(x.len());
                        for r in 0..x.rows() {
                            let (xr, or) = (x.row(r), other.row(r));
                            let dx_n = nx[r].max(NORM_FLOOR);
                            let do_n = no[r].max(NORM_FLOOR);
                            let proj = if nx[r] >= NORM_FLOOR { cos[r] / (dx_n * dx_n) } else { 0.0 };
                            out.extend(
                                xr.iter()
                                    .zip(or)
                                    .map(|(xv, ov)| g[r] * (ov / (dx_n * do_n) - proj * xv)),
                            );
                        }
                        debug_assert_eq!(out.len(), x.rows() * c);
                        out
                    };
                    if want(a) {
                        let da = side(ta, tb, norms_a, norms_b);
                        accumulate(&mut grads[a.0], da);
                    }
                    if want(b) {
                        let db = side(tb, ta, norms_b, norms_a);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = self.value(*logits).cols();
                    let scale = g[0] / labels.len() as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        dl[r * c + l] -= scale;
                    }
                    accumulate(&mut grads[logits.0], dl);
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let s = 2.0 * g[0] / ta.len() as f64;
                    let d: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| s * (x - y)).collect();
                    if want(b) {
                        accumulate(&mut grads[b.0], d.iter().map(|v| -v).collect());
                    }
                    if want(a) {
                        accumulate(&mut grads[a.0], d);
                    }
                }
                Op::Scale(x, f) => {
                    accumulate(&mut grads[x.0], g.iter().map(|v| v * f).collect());
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    if want(a) {
                        let da = g.chunks(ca + cb).flat_map(|r| r[..ca].to_vec()).collect();
                        accumulate(&mut grads[a.0], da);
                    }
                    if want(b) {
                        let db = g.chunks(ca + cb).flat_map(|r| r[ca..].to_vec()).collect();
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Slice { x, start } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let len = node.value.cols();
                    let mut dx = vec![0.0; tx.len()];
                    for (dr, gr) in dx.chunks_mut(c).zip(g.chunks(len)) {
                        dr[*start..start + len].copy_from_slice(gr);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads[x.0], vec![g[0] / n as f64; n]);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads[x.0], vec![g[0]; n]);
                }
                Op::PowerNormalize { x, norms, budget } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let radius = budget.sqrt();
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, xr), &n) in g.chunks(c).zip(tx.data().chunks(c)).zip(norms) {
                        if n > radius {
                            let p = dot(xr, gr) / (n * n);
                            dx.extend(gr.iter().zip(xr).map(|(g, x)| radius / n * (g - x * p)));
                        } else {
                            dx.extend_from_slice(gr);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::ComplexGain { x, gains } => {
                    let c = node.value.cols();
                    let k = c / 2;
                    let mut dx = Vec::with_capacity(g.len());
                    for (gr, &[a, b]) in g.chunks(c).zip(gains) {
                        let (gre, gim) = gr.split_at(k);
                        dx.extend(gre.iter().zip(gim).map(|(r, i)| a * r + b * i));
                        dx.extend(gre.iter().zip(gim).map(|(r, i)| -b * r + a * i));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            params,
            vars: grads,
            shapes,
        })
    }
}
