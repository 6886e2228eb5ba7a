//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation evaluates eagerly, appends a node holding its value and
//! whatever the backward rule needs, and returns a [`Var`] handle. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Any operation producing a NaN or infinity fails with
//! [`Error::NonFinite`] naming the operation.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Narrow { x: Var, start: usize, len: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Attention weights of one head, recorded when capture is enabled.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub label: String,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    param_leaves: HashMap<ParamId, Var>,
    capture: Option<Vec<AttentionMap>>,
    sign_fault: Option<&'static str>,
}

/// Gradients from one backward sweep.
#[derive(Debug)]
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient with respect to `v`, if `v` requires one and was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf that took part in the graph.
    pub fn into_param_map(mut self) -> GradMap<S> {
        let mut map = GradMap::new();
        for (id, var) in std::mem::take(&mut self.params) {
            if let Some(g) = self.grads[var.0].take() {
                map.insert(id, g);
            }
        }
        map
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            capture: None,
            sign_fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn enable_attention_capture(&mut self) {
        self.capture.get_or_insert_with(Vec::new);
    }

    pub fn attention_capture_enabled(&self) -> bool {
        self.capture.is_some()
    }

    pub fn take_attention_maps(&mut self) -> Vec<AttentionMap> {
        self.capture.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub(crate) fn record_attention(&mut self, label: &str, head: usize, weights: Var) {
        if self.capture.is_none() {
            return;
        }
        let t = self.value(weights);
        let map = AttentionMap {
            label: label.to_string(),
            head,
            rows: t.shape()[0],
            cols: t.shape()[1],
            weights: t.to_f64_vec(),
        };
        self.capture.as_mut().expect("checked above").push(map);
    }

    /// Flips the sign of one backward rule. Only meant for verifying that the
    /// gradient checker catches faulty rules.
    #[doc(hidden)]
    pub fn inject_sign_fault(&mut self, op: &'static str) {
        self.sign_fault = Some(op);
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf holding `value`. Gradients are only accumulated for leaves with
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node, so shared parameters accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(id, v);
        v
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. The right operand may
    /// also be rank 2, in which case it is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![S::zero(); dims.batch * dims.m * dims.n];
        for bi in 0..dims.batch {
            let a_off = bi * dims.m * dims.k;
            let b_off = if dims.shared_b { 0 } else { bi * dims.k * dims.n };
            gemm_nn(
                &av.data()[a_off..a_off + dims.m * dims.k],
                &bv.data()[b_off..b_off + dims.k * dims.n],
                &mut out[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n],
                dims.m,
                dims.k,
                dims.n,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(dims.n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", shape.len())));
        }
        let out = transpose_last2(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[d]` vector to every last-axis slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).numel() != d {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs last extent {d}", self.shape(bias)),
            ));
        }
        let (xv, bv) = (self.value(x), self.value(bias));
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .reshape(shape)
            .map_err(|e| Error::shape("reshape", e.to_string()))?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Selects rows (first axis of the `[rows, last]` view) by index.
    /// Repeated indices are allowed; their gradients add up.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let out = self.value(x).gather_rows(idx)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows(x, idx.to_vec()), rg)
    }

    /// Slice `start..start+len` of the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if len == 0 || start + len > d {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} out of last extent {d}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Narrow { x, start, len }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("part {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut data = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| data[at(j)]).fold(S::neg_infinity(), S::max);
                let mut denom = S::zero();
                for j in 0..n {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    denom += e;
                }
                for j in 0..n {
                    data[at(j)] = data[at(j)] / denom;
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Normalises every last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs last extent {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let eps = S::of(eps);
        let dn = S::of(d as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let r = S::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Exact GELU, `x * Phi(x)` with the standard normal CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| v.max(S::zero()) + (-v.abs()).exp().ln_1p());
        let rg = self.rg(&[x]);
        self.push(out, Op::Softplus(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / S::of(xv.numel() as f64));
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut g_ready = g;
            if self.sign_fault == Some(node.op.name()) {
                g_ready.scale_assign(-S::one());
            }
            let g = &g_ready;
            self.backprop_node(idx, g, &mut grads)?;
            grads[idx] = Some(g_ready);
        }

        let params = self.param_leaves.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Grads { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let dims = matmul_dims(av.shape(), bv.shape())?;
                if self.requires_grad(*a) {
                    let mut da = vec![S::zero(); av.numel()];
                    for bi in 0..dims.batch {
                        let b_off = if dims.shared_b { 0 } else { bi * dims.k * dims.n };
                        gemm_nt(
                            &g.data()[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n],
                            &bv.data()[b_off..b_off + dims.k * dims.n],
                            &mut da[bi * dims.m * dims.k..(bi + 1) * dims.m * dims.k],
                            dims.m,
                            dims.n,
                            dims.k,
                        );
                    }
                    accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![S::zero(); bv.numel()];
                    for bi in 0..dims.batch {
                        let b_off = if dims.shared_b { 0 } else { bi * dims.k * dims.n };
                        gemm_tn(
                            &av.data()[bi * dims.m * dims.k..(bi + 1) * dims.m * dims.k],
                            &g.data()[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n],
                            &mut db[b_off..b_off + dims.k * dims.n],
                            dims.m,
                            dims.k,
                            dims.n,
                        );
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::Transpose(x) => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, transpose_last2(g));
                }
            }
            Op::Add(a, b) => {
                self.pass(grads, *a, g);
                self.pass(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.pass(grads, *a, g);
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b);
                    accumulate(grads, *a, zip(g, bv, |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a);
                    accumulate(grads, *b, zip(g, av, |x, y| x * y));
                }
            }
            Op::AddBias(x, bias) => {
                self.pass(grads, *x, g);
                if self.requires_grad(*bias) {
                    let d = g.last_dim();
                    let mut db = vec![S::zero(); d];
                    for row in g.data().chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    accumulate(grads, *bias, Tensor::new(&shape, db)?);
                }
            }
            Op::Scale(x, c) => {
                if self.requires_grad(*x) {
                    let c = *c;
                    accumulate(grads, *x, g.map(|v| v * c));
                }
            }
            Op::Reshape(x) => {
                if self.requires_grad(*x) {
                    let shape = self.shape(*x).to_vec();
                    accumulate(grads, *x, g.reshape(&shape)?);
                }
            }
            Op::GatherRows(x, idx) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x);
                    let d = xv.last_dim();
                    let mut dx = vec![S::zero(); xv.numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (acc, &v) in dx[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
            }
            Op::Narrow { x, start, len } => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x);
                    let d = xv.last_dim();
                    let mut dx = vec![S::zero(); xv.numel()];
                    for (r, row) in dx.chunks_mut(d).enumerate() {
                        row[*start..start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * row + offset;
                            dp.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        accumulate(grads, p, Tensor::new(&ps, dp)?);
                    }
                    offset += chunk;
                }
            }
            Op::Softmax { x, axis } => {
                if self.requires_grad(*x) {
                    let (outer, n, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    let mut dx = vec![S::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: S = (0..n).map(|j| g.data()[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] = y[at(j)] * (g.data()[at(j)] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(out.shape(), dx)?);
                }
            }
            Op::LogSoftmax(x) => {
                if self.requires_grad(*x) {
                    let d = out.last_dim();
                    let mut dx = Vec::with_capacity(out.numel());
                    for (yrow, grow) in out.data().chunks(d).zip(g.data().chunks(d)) {
                        let gsum: S = grow.iter().copied().sum();
                        for (&y, &gv) in yrow.iter().zip(grow) {
                            dx.push(gv - y.exp() * gsum);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(out.shape(), dx)?);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let dn = S::of(d as f64);
                    let mut dx = Vec::with_capacity(out.numel());
                    for (r, grow) in g.data().chunks(d).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            dx.push(rstd[r] * (dh - mean_dh - h[j] * mean_dh_h));
                        }
                    }
                    accumulate(grads, *x, Tensor::new(out.shape(), dx)?);
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![S::zero(); d];
                    for (r, grow) in g.data().chunks(d).enumerate() {
                        for j in 0..d {
                            dg[j] += grow[j] * xhat[r * d + j];
                        }
                    }
                    let shape = self.shape(*gain).to_vec();
                    accumulate(grads, *gain, Tensor::new(&shape, dg)?);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![S::zero(); d];
                    for grow in g.data().chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(grow) {
                            *acc += v;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    accumulate(grads, *bias, Tensor::new(&shape, db)?);
                }
            }
            Op::Gelu(x) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x);
                    accumulate(grads, *x, zip(g, xv, |gv, v| gv * gelu_grad(v)));
                }
            }
            Op::Softplus(x) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x);
                    accumulate(
                        grads,
                        *x,
                        zip(g, xv, |gv, v| gv / (S::one() + (-v).exp())),
                    );
                }
            }
            Op::Sum(x) => {
                if self.requires_grad(*x) {
                    let shape = self.shape(*x).to_vec();
                    accumulate(grads, *x, Tensor::full(&shape, g.item()));
                }
            }
            Op::Mean(x) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x);
                    let c = g.item() / S::of(xv.numel() as f64);
                    accumulate(grads, *x, Tensor::full(xv.shape(), c));
                }
            }
        }
        Ok(())
    }

    fn pass(&self, grads: &mut [Option<Tensor<S>>], x: Var, g: &Tensor<S>) {
        if self.requires_grad(x) {
            accumulate(grads, x, g.clone());
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_last2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let shape = x.shape();
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = x.numel() / (m * n);
    let mut data = vec![S::zero(); x.numel()];
    for b in 0..batch {
        let src = &x.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut data[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(r - 2, r - 1);
    Tensor::new(&out_shape, data).expect("same numel")
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<MatMulDims> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands must have rank >= 2, got {sa:?} and {sb:?}"),
        ));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {sa:?} x {sb:?} ({k} != {k2})"),
        ));
    }
    let batch_a = &sa[..sa.len() - 2];
    let batch_b = &sb[..sb.len() - 2];
    let shared_b = batch_b.is_empty();
    if !shared_b && batch_a != batch_b {
        return Err(Error::shape(
            "matmul",
            format!("batch extents differ: {sa:?} x {sb:?}"),
        ));
    }
    Ok(MatMulDims {
        batch: batch_a.iter().product(),
        m,
        k,
        n,
        shared_b,
    })
}

fn std_normal_cdf<S: Scalar>(x: S) -> S {
    S::of(0.5) * (S::one() + (x * S::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_scalar<S: Scalar>(x: S) -> S {
    x * std_normal_cdf(x)
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let pdf = (S::of(-0.5) * x * x).exp() * S::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    std_normal_cdf(x) + x * pdf
}

/// A tape together with the parameter store its parameter leaves read from.
pub struct Session<'p, S> {
    pub tape: Tape<S>,
    pub store: &'p ParamStore<S>,
}

impl<'p, S: Scalar> Session<'p, S> {
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Session {
            tape: Tape::new(),
            store,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        let store = self.store;
        self.tape.param(store, id)
    }
}

impl<S> Deref for Session<'_, S> {
    type Target = Tape<S>;

    fn deref(&self) -> &Tape<S> {
        &self.tape
    }
}

impl<S> DerefMut for Session<'_, S> {
    fn deref_mut(&mut self) -> &mut Tape<S> {
        &mut self.tape
    }
}
