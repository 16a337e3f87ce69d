//! Wengert-list reverse-mode differentiation.
//!
//! Every op evaluates eagerly, appends its output to the tape and remembers
//! what its backward rule needs. [`Tape::backward`] walks the list in exact
//! reverse order of recording.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::kernels;
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter registry. Registration order is checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        self.trainable.push(true);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Marks exactly the parameters whose name satisfies `pred` as trainable.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (flag, name) in self.trainable.iter_mut().zip(&self.names) {
            *flag = pred(name);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Per-parameter gradients; parameters not reached by the loss hold zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    /// Adds `other` into `self` (gradient accumulation across samples).
    pub fn accumulate(&mut self, other: &Gradients) -> Result<(), NumericsError> {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign_scaled(b, 1.0)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Backward rule for [`Tape::custom`]: `(inputs, output, grad_output) -> grad per input`.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MulConst(Var, Tensor),
    AddChannel(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Conv2d { x: Var, k: Var, cols: Vec<f32> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f64, f64)> },
    Silu(Var),
    AvgPool(Var, usize),
    Upsample(Var, usize),
    Concat(Vec<Var>),
    WeightedMse { pred: Var, target: Tensor, weight: Tensor },
    Sum(Var),
    Custom { name: String, inputs: Vec<Var>, backward: CustomBackward },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::AddChannel(..) => "add_channel",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Silu(_) => "silu",
            Op::AvgPool(..) => "avg_pool",
            Op::Upsample(..) => "upsample",
            Op::Concat(_) => "concat",
            Op::WeightedMse { .. } => "weighted_mse",
            Op::Sum(_) => "sum",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-writer record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.nodes.len()).finish()
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Names of the recorded ops, in recording order.
    pub fn op_names(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.op.name().to_string()).collect()
    }

    fn grad_of(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name().to_string() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant; constants never receive gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter read; it takes part in backward only if trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            requires_grad: store.is_trainable(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.grad_of(a) || self.grad_of(b);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.grad_of(a) || self.grad_of(b);
        self.push(Op::Sub(a, b), out, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.grad_of(a) || self.grad_of(b);
        self.push(Op::Mul(a, b), out, rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var, NumericsError> {
        let out = self.value(a).scale(s);
        let rg = self.grad_of(a);
        self.push(Op::Scale(a, s), out, rg)
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_map(&c, |x, y| x * y)?;
        let rg = self.grad_of(a);
        self.push(Op::MulConst(a, c), out, rg)
    }

    /// `x[c, ...] + b[c]`, broadcasting `b` over every trailing position.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let xs = self.value(x);
        let c = xs.shape()[0];
        if self.value(b).shape() != [c] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_channel",
                lhs: xs.shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let per = xs.numel() / c;
        let mut out = xs.clone();
        let bias = self.value(b).data();
        for (chunk, &bv) in out.data_mut().chunks_mut(per).zip(bias) {
            for v in chunk {
                *v += bv;
            }
        }
        let rg = self.grad_of(x) || self.grad_of(b);
        self.push(Op::AddChannel(x, b), out, rg)
    }

    /// `x[n, d] + b[d]` on every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let [_, d] = self.value(x).dims2("add_row")?;
        if self.value(b).shape() != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let rg = self.grad_of(x) || self.grad_of(b);
        self.push(Op::AddRow(x, b), out, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let [m, k] = self.value(a).dims2("matmul")?;
        let [k2, n] = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let rg = self.grad_of(a) || self.grad_of(b);
        self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out)?, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).transpose2()?;
        let rg = self.grad_of(a);
        self.push(Op::Transpose(a), out, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.grad_of(a);
        self.push(Op::Reshape(a), out, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let [_, cols] = self.value(a).dims2("softmax_rows")?;
        let mut out = self.value(a).clone();
        kernels::softmax_rows(out.data_mut(), cols);
        let rg = self.grad_of(a);
        self.push(Op::Softmax(a), out, rg)
    }

    /// 3×3, stride 1, zero-pad 1 convolution of `x[c_in,h,w]` with `k[c_out,c_in,3,3]`.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var, NumericsError> {
        let [cin, h, w] = self.value(x).dims3("conv2d")?;
        let ks = self.value(k).shape();
        if ks.len() != 4 || ks[1] != cin || ks[2] != 3 || ks[3] != 3 {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                lhs: vec![cin, h, w],
                rhs: ks.to_vec(),
            });
        }
        let cout = ks[0];
        let hw = h * w;
        let mut cols = vec![0.0; cin * 9 * hw];
        kernels::im2col3(self.value(x).data(), cin, h, w, &mut cols);
        let mut out = vec![0.0; cout * hw];
        kernels::gemm(cout, cin * 9, hw, self.value(k).data(), &cols, &mut out, false);
        let rg = self.grad_of(x) || self.grad_of(k);
        let cols = if rg { cols } else { Vec::new() };
        self.push(Op::Conv2d { x, k, cols }, Tensor::new(&[cout, h, w], out)?, rg)
    }

    /// Group normalisation over `x[c, ...]` followed by per-channel `gamma`, `beta`.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f32,
    ) -> Result<Var, NumericsError> {
        let xs = self.value(x);
        let c = xs.shape()[0];
        if groups == 0 || c % groups != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(NumericsError::ShapeMismatch {
                    op: "group_norm",
                    lhs: xs.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let per_channel = xs.numel() / c;
        let per_group = per_channel * (c / groups);
        let stats = kernels::group_stats(xs.data(), groups, eps as f64);
        let mut out = xs.clone();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for (ci, chunk) in out.data_mut().chunks_mut(per_channel).enumerate() {
            let (mean, rstd) = stats[ci * per_channel / per_group];
            for v in chunk {
                *v = (((*v as f64 - mean) * rstd) as f32) * g[ci] + b[ci];
            }
        }
        let rg = self.grad_of(x) || self.grad_of(gamma) || self.grad_of(beta);
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            out,
            rg,
        )
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let rg = self.grad_of(a);
        self.push(Op::Silu(a), out, rg)
    }

    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Result<Var, NumericsError> {
        let [c, h, w] = self.value(a).dims3("avg_pool")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "avg_pool factor {factor} does not divide {h}x{w}"
            )));
        }
        let out = kernels::avg_pool(self.value(a).data(), c, h, w, factor);
        let rg = self.grad_of(a);
        self.push(Op::AvgPool(a, factor), Tensor::new(&[c, h / factor, w / factor], out)?, rg)
    }

    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var, NumericsError> {
        let [c, h, w] = self.value(a).dims3("upsample")?;
        let out = kernels::upsample_nearest(self.value(a).data(), c, h, w, factor);
        let rg = self.grad_of(a);
        self.push(Op::Upsample(a, factor), Tensor::new(&[c, h * factor, w * factor], out)?, rg)
    }

    /// Concatenation along the leading axis (channels for `[c,h,w]`, rows for `[n,d]`).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_leading(&tensors)?;
        let rg = parts.iter().any(|&p| self.grad_of(p));
        self.push(Op::Concat(parts.to_vec()), out, rg)
    }

    /// `mean(weight ⊙ (pred − target)²)`; a `[h,w]` weight broadcasts over leading channels.
    pub fn weighted_mse(&mut self, pred: Var, target: &Tensor, weight: &Tensor) -> Result<Var, NumericsError> {
        let p = self.value(pred);
        target.expect_shape("weighted_mse", p.shape())?;
        let wlen = weight.numel();
        if p.numel() % wlen != 0 || p.shape()[p.ndim() - weight.ndim()..] != *weight.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_mse",
                lhs: p.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let wd = weight.data();
        let sum: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .enumerate()
            .map(|(i, (&a, &b))| {
                let d = (a - b) as f64;
                wd[i % wlen] as f64 * d * d
            })
            .sum();
        let loss = (sum / p.numel() as f64) as f32;
        let rg = self.grad_of(pred);
        self.push(
            Op::WeightedMse {
                pred,
                target: target.clone(),
                weight: weight.clone(),
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).sum() as f32;
        let rg = self.grad_of(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Records a user-defined op with an explicit forward value and backward rule.
    pub fn custom(
        &mut self,
        name: &str,
        inputs: &[Var],
        value: Tensor,
        backward: CustomBackward,
    ) -> Result<Var, NumericsError> {
        let rg = inputs.iter().any(|&v| self.grad_of(v));
        self.push(
            Op::Custom {
                name: name.to_string(),
                inputs: inputs.to_vec(),
                backward,
            },
            value,
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients, NumericsError> {
        if loss.0 >= self.nodes.len() {
            return Err(NumericsError::NotOnTape);
        }
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut params = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, t: Tensor| -> Result<(), NumericsError> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign_scaled(&t, 1.0),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if id.0 < params.grads.len() {
                        params.grads[id.0].add_assign_scaled(&g, 1.0)?;
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::Sub(a, b) => {
                    send(*b, g.scale(-1.0))?;
                    send(*a, g)?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    send(*a, g.zip_map(bv, |x, y| x * y)?)?;
                    send(*b, g.zip_map(av, |x, y| x * y)?)?;
                }
                Op::Scale(a, s) => send(*a, g.scale(*s))?,
                Op::MulConst(a, c) => send(*a, g.zip_map(c, |x, y| x * y)?)?,
                Op::AddChannel(x, b) => {
                    let c = self.shape(*b)[0];
                    let per = g.numel() / c;
                    let db: Vec<f32> = g
                        .data()
                        .chunks(per)
                        .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() as f32)
                        .collect();
                    send(*b, Tensor::new(&[c], db)?)?;
                    send(*x, g)?;
                }
                Op::AddRow(x, b) => {
                    let d = self.shape(*b)[0];
                    let mut db = vec![0.0f64; d];
                    for row in g.data().chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v as f64;
                        }
                    }
                    send(*b, Tensor::new(&[d], db.into_iter().map(|v| v as f32).collect())?)?;
                    send(*x, g)?;
                }
                Op::MatMul(a, b) => {
                    let [m, k] = self.value(*a).dims2("matmul")?;
                    let n = self.shape(*b)[1];
                    if self.grad_of(*a) {
                        let mut da = vec![0.0; m * k];
                        kernels::gemm_nt(m, n, k, g.data(), self.value(*b).data(), &mut da, false);
                        send(*a, Tensor::new(&[m, k], da)?)?;
                    }
                    if self.grad_of(*b) {
                        let mut db = vec![0.0; k * n];
                        kernels::gemm_tn(k, m, n, self.value(*a).data(), g.data(), &mut db, false);
                        send(*b, Tensor::new(&[k, n], db)?)?;
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose2()?)?,
                Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    send(*a, g.reshape(&shape)?)?;
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let cols = y.shape()[1];
                    let mut dx = vec![0.0; y.numel()];
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks(cols)
                        .zip(g.data().chunks(cols))
                        .zip(dx.chunks_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(&p, &q)| (p * q) as f64).sum();
                        for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = p * (q - dot as f32);
                        }
                    }
                    send(*a, Tensor::new(y.shape(), dx)?)?;
                }
                Op::Conv2d { x, k, cols } => {
                    let [cin, h, w] = self.value(*x).dims3("conv2d")?;
                    let cout = self.shape(*k)[0];
                    let hw = h * w;
                    if self.grad_of(*k) {
                        let mut dk = vec![0.0; cout * cin * 9];
                        kernels::gemm_nt(cout, hw, cin * 9, g.data(), cols, &mut dk, false);
                        send(*k, Tensor::new(&[cout, cin, 3, 3], dk)?)?;
                    }
                    if self.grad_of(*x) {
                        let mut dcols = vec![0.0; cin * 9 * hw];
                        kernels::gemm_tn(cin * 9, cout, hw, self.value(*k).data(), g.data(), &mut dcols, false);
                        let mut dx = vec![0.0; cin * hw];
                        kernels::col2im3(&dcols, cin, h, w, &mut dx);
                        send(*x, Tensor::new(&[cin, h, w], dx)?)?;
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let xv = self.value(*x);
                    let gam = self.value(*gamma).data();
                    let c = gam.len();
                    let per_channel = xv.numel() / c;
                    let cpg = c / groups;
                    let per_group = per_channel * cpg;
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    let mut dx = vec![0.0f32; xv.numel()];
                    for (gi, &(mean, rstd)) in stats.iter().enumerate() {
                        let range = gi * per_group..(gi + 1) * per_group;
                        let xs = &xv.data()[range.clone()];
                        let gs = &g.data()[range.clone()];
                        let mut sum_dxhat = 0.0f64;
                        let mut sum_dxhat_xhat = 0.0f64;
                        for (i, (&xval, &gval)) in xs.iter().zip(gs).enumerate() {
                            let ch = gi * cpg + i / per_channel;
                            let xhat = (xval as f64 - mean) * rstd;
                            let dxhat = gval as f64 * gam[ch] as f64;
                            dgamma[ch] += gval as f64 * xhat;
                            dbeta[ch] += gval as f64;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let n = per_group as f64;
                        for (i, (&xval, &gval)) in xs.iter().zip(gs).enumerate() {
                            let ch = gi * cpg + i / per_channel;
                            let xhat = (xval as f64 - mean) * rstd;
                            let dxhat = gval as f64 * gam[ch] as f64;
                            dx[range.start + i] =
                                (rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)) as f32;
                        }
                    }
                    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
                    send(*gamma, Tensor::new(&[c], to32(dgamma))?)?;
                    send(*beta, Tensor::new(&[c], to32(dbeta))?)?;
                    send(*x, Tensor::new(xv.shape(), dx)?)?;
                }
                Op::Silu(a) => {
                    let dx = self.value(*a).zip_map(&g, |x, gv| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        gv * s * (1.0 + x * (1.0 - s))
                    })?;
                    send(*a, dx)?;
                }
                Op::AvgPool(a, f) => {
                    let [c, h, w] = g.dims3("avg_pool")?;
                    let inv = 1.0 / (f * f) as f32;
                    let mut up = kernels::upsample_nearest(g.data(), c, h, w, *f);
                    up.iter_mut().for_each(|v| *v *= inv);
                    send(*a, Tensor::new(&[c, h * f, w * f], up)?)?;
                }
                Op::Upsample(a, f) => {
                    let [c, h, w] = g.dims3("upsample")?;
                    let scale = (f * f) as f32;
                    let mut down = kernels::avg_pool(g.data(), c, h, w, *f);
                    down.iter_mut().for_each(|v| *v *= scale);
                    send(*a, Tensor::new(&[c, h / f, w / f], down)?)?;
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let lead = self.shape(p)[0];
                        send(p, g.slice_leading(start, start + lead)?)?;
                        start += lead;
                    }
                }
                Op::WeightedMse { pred, target, weight } => {
                    let p = self.value(*pred);
                    let wlen = weight.numel();
                    let scale = 2.0 * g.data()[0] / p.numel() as f32;
                    let wd = weight.data();
                    let dp: Vec<f32> = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .enumerate()
                        .map(|(i, (&a, &b))| scale * wd[i % wlen] * (a - b))
                        .collect();
                    send(*pred, Tensor::new(p.shape(), dp)?)?;
                }
                Op::Sum(a) => send(*a, Tensor::full(self.shape(*a), g.data()[0]))?,
                Op::Custom { inputs, backward, .. } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gi = backward(&vals, &node.value, &g);
                    for (&v, t) in inputs.iter().zip(gi) {
                        send(v, t)?;
                    }
                }
            }
        }
        Ok(params)
    }
}
