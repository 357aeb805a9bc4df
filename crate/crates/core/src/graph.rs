//! Reverse-mode differentiation over a dynamically built operation tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order. Leaves come in three flavours:
//!
//! * [`Graph::constant`] values never receive a gradient,
//! * [`Graph::input`] values do,
//! * [`Graph::param`] binds a named [`Parameter`] so that [`Gradients`] can be
//!   routed back to it by name.

use std::collections::BTreeMap;

use crate::error::{FgdError, Result};
use crate::tensor::{strides, Parameter, Tensor};

/// `eps` added to the variance inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind tag of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar,
    Square,
    Abs,
    Relu,
    Sum,
    Mean,
    SoftmaxT,
    Conv1x1,
    LayerNorm,
    MatMul,
    Reshape,
    BroadcastTo,
    SelectBatch,
    ConcatBatch,
    AvgPool2,
    WeightedSqErr,
}

/// Elementwise operation selector for [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Square,
    Abs,
}

/// Right-hand side of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
    None,
}

/// Reduction selector for [`Graph::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Reduce { input: Var, map: Vec<usize>, scale: f64, mean: bool },
    Softmax { input: Var, axis: usize, temperature: f64 },
    Conv1x1 { x: Var, w: Var, bias: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, inner: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MatMul(Var, Var),
    Reshape(Var),
    BroadcastTo { input: Var, map: Vec<usize> },
    SelectBatch { input: Var, index: usize },
    ConcatBatch(Vec<Var>),
    AvgPool2(Var),
    WeightedSqErr { a: Var, b: Var, weights: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Square(..) => OpKind::Square,
            Op::Abs(..) => OpKind::Abs,
            Op::Relu(..) => OpKind::Relu,
            Op::Reduce { mean: false, .. } => OpKind::Sum,
            Op::Reduce { mean: true, .. } => OpKind::Mean,
            Op::Softmax { .. } => OpKind::SoftmaxT,
            Op::Conv1x1 { .. } => OpKind::Conv1x1,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Reshape(..) => OpKind::Reshape,
            Op::BroadcastTo { .. } => OpKind::BroadcastTo,
            Op::SelectBatch { .. } => OpKind::SelectBatch,
            Op::ConcatBatch(..) => OpKind::ConcatBatch,
            Op::AvgPool2(..) => OpKind::AvgPool2,
            Op::WeightedSqErr { .. } => OpKind::WeightedSqErr,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupts the backward rule of one op kind (scales its upstream
    /// gradient by 1.5). Only used to prove the gradient checks can fail.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false), false)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true), true)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        let v = self.leaf(p.tensor.clone(), true);
        self.params.push((p.name.clone(), v));
        v
    }

    fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        // values live in the graph; the gradient buffer of the source does not
        t = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    // ---- elementwise ---------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, rhs: Operand) -> Result<Var> {
        match (kind, rhs) {
            (Elementwise::Add, Operand::Var(b)) => self.add(a, b),
            (Elementwise::Sub, Operand::Var(b)) => self.sub(a, b),
            (Elementwise::Mul, Operand::Var(b)) => self.mul(a, b),
            (Elementwise::Add, Operand::Scalar(c)) => Ok(self.add_scalar(a, c)),
            (Elementwise::Sub, Operand::Scalar(c)) => Ok(self.add_scalar(a, -c)),
            (Elementwise::Mul, Operand::Scalar(c)) => Ok(self.scale(a, c)),
            (Elementwise::Square, Operand::None) => Ok(self.square(a)),
            (Elementwise::Abs, Operand::None) => Ok(self.abs(a)),
            (k, r) => Err(FgdError::Contract(format!("{k:?} does not take operand {r:?}"))),
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(FgdError::dim(format!(
                "elementwise shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::MulScalar(a, c), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(t, Op::Abs(a), rg)
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    // ---- reductions ----------------------------------------------------

    pub fn reduce(&mut self, kind: Reduction, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(FgdError::dim(format!("axis {bad} out of range for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let reduced: usize = axes.iter().map(|&ax| shape[ax]).product();
        let map = reduce_map(&shape, &axes);
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_len];
        for (v, &o) in self.value(a).data().iter().zip(&map) {
            out[o] += v;
        }
        let mean = kind == Reduction::Mean;
        let scale = if mean { 1.0 / reduced as f64 } else { 1.0 };
        if mean {
            out.iter_mut().for_each(|v| *v /= reduced as f64);
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reduce { input: a, map, scale, mean }, rg))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(Reduction::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(Reduction::Mean, a, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes).expect("all axes are valid")
    }

    // ---- softmax -------------------------------------------------------

    /// `softmax(a / temperature)` along `axis`, computed after subtracting the
    /// per-slice maximum.
    pub fn softmax_t(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(FgdError::param(format!("temperature must be positive, got {temperature}")));
        }
        let t = softmax_values(self.value(a), axis, temperature)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax { input: a, axis, temperature }, rg))
    }

    // ---- layers --------------------------------------------------------

    /// Per-pixel linear map across channels: `x` is `[B, Cin, H, W]`,
    /// `w` is `[Cout, Cin]`, `bias` is `[Cout]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(FgdError::dim(format!("conv1x1 of input {xs:?} with weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(FgdError::dim(format!(
                    "conv1x1 bias {:?} for {} output channels",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let (batch, cin, p) = (xs[0], xs[1], xs[2] * xs[3]);
        let cout = ws[0];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; batch * cout * p];
        for b in 0..batch {
            for o in 0..cout {
                let dst = &mut out[(b * cout + o) * p..(b * cout + o + 1) * p];
                for i in 0..cin {
                    let wi = wv[o * cin + i];
                    let src = &xv[(b * cin + i) * p..(b * cin + i + 1) * p];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += wi * s);
                }
            }
        }
        if let Some(bv) = bias {
            let bv = self.value(bv).data();
            for b in 0..batch {
                for o in 0..cout {
                    out[(b * cout + o) * p..(b * cout + o + 1) * p]
                        .iter_mut()
                        .for_each(|d| *d += bv[o]);
                }
            }
        }
        let t = Tensor::new(vec![batch, cout, xs[2], xs[3]], out)?;
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Conv1x1 { x, w, bias }, rg))
    }

    /// `(x − mean) / sqrt(var + eps) · gamma + beta` over `axes`, which must
    /// be the trailing axes of `x`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = axes.len();
        let trailing: Vec<usize> = (xs.len().saturating_sub(k)..xs.len()).collect();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if k == 0 || k > xs.len() || sorted != trailing {
            return Err(FgdError::dim(format!(
                "layer_norm axes {axes:?} must be the trailing axes of {xs:?}"
            )));
        }
        let norm_shape = &xs[xs.len() - k..];
        if self.shape(gamma) != norm_shape || self.shape(beta) != norm_shape {
            return Err(FgdError::dim(format!(
                "layer_norm gamma {:?} / beta {:?} vs normalised shape {norm_shape:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let inner: usize = norm_shape.iter().product();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / inner;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * inner..(r + 1) * inner];
            let mu = row.iter().sum::<f64>() / inner as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / inner as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..inner {
                let h = (row[j] - mu) * is;
                xhat[r * inner + j] = h;
                out[r * inner + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, inner, xhat, inv_std }, rg))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(FgdError::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn relu_layer(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.conv1x1(x, w, bias)?;
        Ok(self.relu(y))
    }

    // ---- shape manipulation -------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t.with_requires_grad(false), Op::Reshape(a), rg))
    }

    /// Right-aligned broadcast where extents of 1 (or missing leading axes)
    /// are repeated to reach `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        let map = broadcast_map(&src, shape)?;
        let av = self.value(a).data();
        let out = map.iter().map(|&i| av[i]).collect();
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::BroadcastTo { input: a, map }, rg))
    }

    /// Item `index` along axis 0, keeping the axis with extent 1.
    pub fn select_batch(&mut self, a: Var, index: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || index >= s[0] {
            return Err(FgdError::dim(format!("batch index {index} for shape {s:?}")));
        }
        let per = self.value(a).numel() / s[0];
        let data = self.value(a).data()[index * per..(index + 1) * per].to_vec();
        let mut shape = s;
        shape[0] = 1;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SelectBatch { input: a, index }, rg))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let t = Tensor::stack_batch(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatBatch(parts.to_vec()), rg))
    }

    /// 2×2 mean pooling with stride 2 over `[B, C, H, W]`.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(FgdError::dim(format!("avg_pool2 needs even spatial dims, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = s[0] * s[1];
        let av = self.value(a).data();
        let mut out = vec![0.0; planes * oh * ow];
        for pl in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    let base = pl * h * w;
                    let v = av[base + 2 * i * w + 2 * j]
                        + av[base + 2 * i * w + 2 * j + 1]
                        + av[base + (2 * i + 1) * w + 2 * j]
                        + av[base + (2 * i + 1) * w + 2 * j + 1];
                    out[pl * oh * ow + i * ow + j] = 0.25 * v;
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::AvgPool2(a), rg))
    }

    /// `Σ w · (a − b)²` with constant weights `w` of the same shape.
    pub fn weighted_sq_err(&mut self, a: Var, b: Var, weights: &Tensor) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa != weights.shape() {
            return Err(FgdError::dim(format!(
                "weighted_sq_err shapes {:?}, {:?}, weights {:?}",
                sa,
                sb,
                weights.shape()
            )));
        }
        let v: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .zip(weights.data())
            .map(|((x, y), w)| w * (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        let op = Op::WeightedSqErr { a, b, weights: weights.data().to_vec() };
        Ok(self.push(Tensor::scalar(v), op, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(FgdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut by_param = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.value(*v).numel()]);
            by_param
                .entry(name.clone())
                .and_modify(|acc: &mut Vec<f64>| acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b))
                .or_insert(g);
        }
        Ok(Gradients { grads, by_param })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &self.nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
            f(slot);
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).zip(bv).for_each(|((d, x), y)| *d += x * y)
                });
                acc(*b, &mut |s| {
                    s.iter_mut().zip(g).zip(av).for_each(|((d, x), y)| *d += x * y)
                });
            }
            Op::AddScalar(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::MulScalar(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, x)| *d += c * x)),
            Op::Square(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).zip(av).for_each(|((d, x), v)| *d += 2.0 * v * x)
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).zip(av).for_each(|((d, x), v)| *d += sign(*v) * x)
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(av)
                        .for_each(|((d, x), v)| if *v > 0.0 { *d += x })
                });
            }
            Op::Reduce { input, map, scale, .. } => acc(*input, &mut |s| {
                s.iter_mut().zip(map).for_each(|(d, &o)| *d += scale * g[o])
            }),
            Op::Softmax { input, axis, temperature } => {
                let shape = out.shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let y = out.data();
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + j;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                s[at(k)] += y[at(k)] * (g[at(k)] - dot) / temperature;
                            }
                        }
                    }
                });
            }
            Op::Conv1x1 { x, w, bias } => {
                let xs = self.shape(*x);
                let (batch, cin, p) = (xs[0], xs[1], xs[2] * xs[3]);
                let cout = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                acc(*x, &mut |s| {
                    for b in 0..batch {
                        for o in 0..cout {
                            let go = &g[(b * cout + o) * p..(b * cout + o + 1) * p];
                            for i in 0..cin {
                                let wi = wv[o * cin + i];
                                s[(b * cin + i) * p..(b * cin + i + 1) * p]
                                    .iter_mut()
                                    .zip(go)
                                    .for_each(|(d, v)| *d += wi * v);
                            }
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for b in 0..batch {
                        for o in 0..cout {
                            let go = &g[(b * cout + o) * p..(b * cout + o + 1) * p];
                            for i in 0..cin {
                                let xi = &xv[(b * cin + i) * p..(b * cin + i + 1) * p];
                                s[o * cin + i] += go.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
                            }
                        }
                    }
                });
                if let Some(bv) = bias {
                    acc(*bv, &mut |s| {
                        for b in 0..batch {
                            for o in 0..cout {
                                s[o] += g[(b * cout + o) * p..(b * cout + o + 1) * p].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, inner, xhat, inv_std } => {
                let inner = *inner;
                let gv = self.value(*gamma).data();
                let rows = g.len() / inner;
                acc(*gamma, &mut |s| {
                    for r in 0..rows {
                        for j in 0..inner {
                            s[j] += g[r * inner + j] * xhat[r * inner + j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for r in 0..rows {
                        for j in 0..inner {
                            s[j] += g[r * inner + j];
                        }
                    }
                });
                acc(*x, &mut |s| {
                    let n = inner as f64;
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..inner).map(|j| g[r * inner + j] * gv[j]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 =
                            dxhat.iter().enumerate().map(|(j, d)| d * xhat[r * inner + j]).sum();
                        for j in 0..inner {
                            s[r * inner + j] += inv_std[r] / n
                                * (n * dxhat[j] - sum_d - xhat[r * inner + j] * sum_dx);
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for p in 0..k {
                            s[i * k + p] += (0..n).map(|j| g[i * n + j] * bv[p * n + j]).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for p in 0..k {
                        for j in 0..n {
                            s[p * n + j] += (0..m).map(|i| av[i * k + p] * g[i * n + j]).sum::<f64>();
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::BroadcastTo { input, map } => acc(*input, &mut |s| {
                map.iter().zip(g).for_each(|(&i, v)| s[i] += v)
            }),
            Op::SelectBatch { input, index } => {
                let per = g.len();
                acc(*input, &mut |s| add_into(&mut s[index * per..(index + 1) * per], g));
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let slice = &g[offset..offset + len];
                    acc(p, &mut |s| add_into(s, slice));
                    offset += len;
                }
            }
            Op::AvgPool2(a) => {
                let s_in = self.shape(*a);
                let (h, w) = (s_in[2], s_in[3]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = s_in[0] * s_in[1];
                acc(*a, &mut |s| {
                    for pl in 0..planes {
                        for i in 0..h {
                            for j in 0..w {
                                s[pl * h * w + i * w + j] += 0.25 * g[pl * oh * ow + (i / 2) * ow + j / 2];
                            }
                        }
                    }
                });
            }
            Op::WeightedSqErr { a, b, weights } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let g0 = g[0];
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * weights[i] * (av[i] - bv[i]) * g0;
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= 2.0 * weights[i] * (av[i] - bv[i]) * g0;
                    }
                });
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    by_param: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    /// Gradient of `v`; `None` when no path from the loss reaches it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the parameter bound under `name`, summed over every
    /// binding of that name.
    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.by_param.get(name).map(Vec::as_slice)
    }

    /// Adds the gradients of every bound parameter into `params`.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        for p in params {
            if let Some(g) = self.by_param.get(&p.name) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Overflow-safe temperature softmax along `axis`.
pub fn softmax_values(t: &Tensor, axis: usize, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(FgdError::param(format!("temperature must be positive, got {temperature}")));
    }
    if axis >= t.rank() {
        return Err(FgdError::dim(format!("softmax axis {axis} for shape {:?}", t.shape())));
    }
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + j;
            let m = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..n {
                let e = ((x[at(k)] - m) / temperature).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Output flat index of every input element after dropping `axes`.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let kept: Vec<usize> = (0..shape.len()).filter(|i| !axes.contains(i)).collect();
    let kept_shape: Vec<usize> = kept.iter().map(|&i| shape[i]).collect();
    let out_strides = strides(&kept_shape);
    let n: usize = shape.iter().product();
    (0..n)
        .map(|flat| {
            kept.iter()
                .zip(&out_strides)
                .map(|(&ax, &os)| (flat / in_strides[ax]) % shape[ax] * os)
                .sum()
        })
        .collect()
}

/// Source flat index of every output element of a broadcast.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Result<Vec<usize>> {
    if src.len() > dst.len() {
        return Err(FgdError::dim(format!("cannot broadcast {src:?} to {dst:?}")));
    }
    let lead = dst.len() - src.len();
    for (i, &d) in src.iter().enumerate() {
        if d != 1 && d != dst[lead + i] {
            return Err(FgdError::dim(format!("cannot broadcast {src:?} to {dst:?}")));
        }
    }
    let src_strides = strides(src);
    let dst_strides = strides(dst);
    let n: usize = dst.iter().product();
    Ok((0..n)
        .map(|flat| {
            src.iter()
                .enumerate()
                .filter(|(_, &d)| d != 1)
                .map(|(i, _)| (flat / dst_strides[lead + i]) % dst[lead + i] * src_strides[i])
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_slice(v)
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(t1(&[1.0, -2.0, 3.0]));
        let sq = g.elementwise(Elementwise::Square, x, Operand::None).unwrap();
        assert_eq!(g.value(sq).data(), &[1.0, 4.0, 9.0]);
        let z = g.elementwise(Elementwise::Sub, x, Operand::Var(x)).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        let h = g.constant(t1(&[-0.5, 0.5]));
        let a = g.elementwise(Elementwise::Abs, h, Operand::None).unwrap();
        assert_eq!(g.value(a).data(), &[0.5, 0.5]);
    }

    #[test]
    fn elementwise_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(t1(&[1.0, 2.0]));
        let b = g.constant(t1(&[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(FgdError::Dimension(_))));
        assert!(matches!(
            g.elementwise(Elementwise::Square, a, Operand::Var(b)),
            Err(FgdError::Contract(_))
        ));
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 1, 1], vec![4.0, 2.0]).unwrap());
        let m = g.mean(x, &[1]).unwrap();
        assert_eq!(g.shape(m), &[1, 1, 1]);
        assert_eq!(g.value(m).data(), &[3.0]);
        let ones = g.constant(Tensor::ones(&[2, 3]));
        let s = g.sum(ones, &[0, 1]).unwrap();
        assert_eq!(g.value(s).item(), 6.0);
        let c = g.constant(Tensor::full(&[3, 2], 1.75));
        let mc = g.mean_all(c);
        assert_eq!(g.value(mc).item(), 1.75);
        assert!(matches!(g.sum(c, &[2]), Err(FgdError::Dimension(_))));
    }

    #[test]
    fn reduce_middle_axis_keeps_order() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap());
        let s = g.sum(x, &[1]).unwrap();
        // [[0,1],[2,3]] -> [2,4]; [[4,5],[6,7]] -> [10,12]
        assert_eq!(g.value(s).data(), &[2.0, 4.0, 10.0, 12.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[4], 2.5));
        let s = g.softmax_t(c, 0, 1.0).unwrap();
        assert!(g.value(s).data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let x = g.constant(t1(&[0.0, 3f64.ln()]));
        let s = g.softmax_t(x, 0, 1.0).unwrap();
        let d = g.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        let x = g.constant(t1(&[0.0, 1.0]));
        let s = g.softmax_t(x, 0, 1e6).unwrap();
        assert!(g.value(s).data().iter().all(|v| (v - 0.5).abs() < 1e-5));

        assert!(matches!(g.softmax_t(x, 0, 0.0), Err(FgdError::Parameter(_))));
        assert!(matches!(g.softmax_t(x, 0, -1.0), Err(FgdError::Parameter(_))));
    }

    #[test]
    fn softmax_is_overflow_safe() {
        let mut g = Graph::new();
        let x = g.constant(t1(&[1e300, -1e300, 0.0]));
        let s = g.softmax_t(x, 0, 1e-3).unwrap();
        assert!(g.value(s).is_finite());
        assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv1x1_examples() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..8).map(|v| v as f64 - 3.0).collect();
        let x = g.constant(Tensor::new(vec![1, 2, 2, 2], data.clone()).unwrap());
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zb = g.constant(Tensor::zeros(&[2]));
        let y = g.conv1x1(x, eye, Some(zb)).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());

        let zw = g.constant(Tensor::zeros(&[2, 2]));
        let y = g.conv1x1(x, zw, Some(zb)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let px = g.constant(Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let y = g.conv1x1(px, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);

        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.conv1x1(px, bad, None), Err(FgdError::Dimension(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::ones(&[2]));
        let zero = g.constant(Tensor::zeros(&[2]));
        let c = g.constant(t1(&[3.0, 3.0]));
        let y = g.layer_norm(c, one, zero, &[0]).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(t1(&[-1.0, 1.0]));
        let y = g.layer_norm(x, one, zero, &[0]).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((g.value(y).data()[0] + expect).abs() < 1e-15);
        assert!((g.value(y).data()[1] - expect).abs() < 1e-15);
        assert!((expect - 1.0).abs() < 1e-5);

        let five = g.constant(Tensor::full(&[2], 5.0));
        let y = g.layer_norm(x, zero, five, &[0]).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 5.0]);

        let m = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.layer_norm(m, one, zero, &[0]).is_err());
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.constant(t1(&[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let n = g.constant(t1(&[-3.0, -0.1]));
        let y = g.relu(n);
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let p = g.constant(t1(&[0.0, 0.5, 7.0]));
        let y = g.relu(p);
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 7.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t1(&[0.0, 1.0]));
        let y = g.relu(x);
        let l = g.sum_all(y);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.input(t1(&[1.0, 2.0]));
        let sq = g.square(x);
        let l = g.sum_all(sq);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(x).unwrap(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let p = Parameter::new("p", t1(&[1.0, 2.0, 3.0]));
        let pv = g.param(&p);
        let x = g.input(t1(&[0.3, -4.0]));
        let l = g.sum_all(x);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(x).unwrap(), &[1.0, 1.0]);
        assert!(gr.wrt(pv).is_none());
        assert_eq!(gr.param("p").unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(t1(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(FgdError::Contract(_))));
    }

    #[test]
    fn broadcast_and_select() {
        let mut g = Graph::new();
        let v = g.input(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap());
        let b = g.broadcast_to(v, &[1, 2, 2, 2]).unwrap();
        assert_eq!(g.value(b).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let l = g.sum_all(b);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(v).unwrap(), &[4.0, 4.0]);
        assert!(g.broadcast_to(v, &[1, 3, 1, 1]).is_err());

        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = g.select_batch(x, 1).unwrap();
        assert_eq!(g.value(s).data(), &[3.0, 4.0]);
        let l = g.sum_all(s);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(x).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn avg_pool_requires_even_dims() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[3.0]);
        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(g.avg_pool2(odd).is_err());
    }

    #[test]
    fn fault_injection_scales_gradient() {
        let mut g = Graph::new();
        g.inject_backward_fault(Some(OpKind::Square));
        let x = g.input(t1(&[1.0, 2.0]));
        let sq = g.square(x);
        let l = g.sum_all(sq);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(x).unwrap(), &[3.0, 6.0]);
    }
}
