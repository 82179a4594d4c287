use std::sync::Arc;

use super::index;
use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a * x + b`
    Affine(Var, f64),
    DivScalar(Var, f64),
    Relu(Var),
    /// Passes the first operand where the second is positive.
    ReluMask(Var, Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Softmax(Var, usize),
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
    },
    ConvInputGrad {
        g: Var,
        k: Var,
        stride: usize,
        padding: usize,
    },
    ConvKernelGrad {
        x: Var,
        g: Var,
        stride: usize,
        padding: usize,
    },
    Sum(Var, Vec<usize>),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    CrossEntropy(Var, usize),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::DivScalar(..) => "div_scalar",
            Op::Relu(_) => "relu",
            Op::ReluMask(..) => "relu_mask",
            Op::Sigmoid(_) => "sigmoid",
            Op::MatMul(..) => "matmul",
            Op::Softmax(..) => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvKernelGrad { .. } => "conv2d_kernel_grad",
            Op::Sum(..) => "sum",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Concat(..) => "concat",
            Op::Reshape(_) => "reshape",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::ReluMask(a, b) => {
                vec![*a, *b]
            }
            Op::Affine(x, ..)
            | Op::DivScalar(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x, _)
            | Op::Sum(x, _)
            | Op::Gather(x, _)
            | Op::ScatterAdd(x, _)
            | Op::Reshape(x)
            | Op::CrossEntropy(x, _) => vec![*x],
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::ConvInputGrad { g, k, .. } => vec![*g, *k],
            Op::ConvKernelGrad { x, g, .. } => vec![*x, *g],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Arena of values from one forward pass, in topological (insertion) order.
///
/// Nodes that do not depend on any `requires_grad` leaf are stored as
/// constants without their operation, so frozen sub-networks cost nothing on
/// the way back.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    last_visits: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            last_visits: 0,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.recording && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Handle of the node at position `id` in insertion order.
    pub fn var(&self, id: usize) -> Var {
        assert!(id < self.nodes.len(), "node {id} does not exist");
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation tag of the node (`"leaf"` for inputs and constants).
    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Number of gradient rules executed by the most recent backward pass.
    pub fn last_backward_visits(&self) -> usize {
        self.last_visits
    }

    // ---- elementwise -------------------------------------------------------

    /// Aligns `b` to `a` (or `a` to `b`) for a binary op: equal shapes, a
    /// one-element operand, or an `[h,w]` map against `[c,h,w]`.
    fn align(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let fits = |small: &[usize], big: &[usize]| {
            small.iter().product::<usize>() == 1 && small.len() <= big.len() || (big.len() == small.len() + 1 && big[1..] == *small)
        };
        if fits(&sb, &sa) {
            let b = self.expand_to(b, &sa)?;
            Ok((a, b))
        } else if fits(&sa, &sb) {
            let a = self.expand_to(a, &sb)?;
            Ok((a, b))
        } else {
            dim_err(op, &sa, &sb)
        }
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("add", a, b)?;
        let v = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("sub", a, b)?;
        let v = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.align("mul", a, b)?;
        let v = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.map_value(x, |t| a * t + b);
        self.push(v, Op::Affine(x, a))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.map_value(x, |t| c * t);
        self.push(v, Op::Affine(x, c))
    }

    /// `x / d`, computed as a true division so that e.g. `f / 3` is exact.
    pub fn div_scalar(&mut self, x: Var, d: f64) -> Var {
        let v = self.map_value(x, |t| t / d);
        self.push(v, Op::DivScalar(x, d))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map_value(x, |t| if t > 0.0 { t } else { 0.0 });
        self.push(v, Op::Relu(x))
    }

    fn relu_mask(&mut self, g: Var, x: Var) -> Var {
        let v = self.zip_values(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
        self.push(v, Op::ReluMask(g, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map_value(x, sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::Usage(format!("{op:?} takes {arity} operand(s), got {}", args.len())));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Relu => Ok(self.relu(args[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(args[0])),
            Elementwise::Scale(c) => Ok(self.scale(args[0], c)),
        }
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return dim_err("transpose", self.shape(x), &[]);
        }
        self.permute(x, &[1, 0])
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let Some(geom) = ConvGeom::new(self.shape(x), self.shape(k), stride, padding) else {
            return dim_err("conv2d", self.shape(x), self.shape(k));
        };
        let data = kernels::conv2d(self.value(x).data(), self.value(k).data(), &geom);
        let value = Tensor::from_parts(vec![geom.c_out, geom.oh, geom.ow], data);
        Ok(self.push(value, Op::Conv2d { x, k, stride, padding }))
    }

    fn conv_input_grad(&mut self, g: Var, k: Var, x_shape: &[usize], stride: usize, padding: usize) -> Var {
        let geom = ConvGeom::new(x_shape, self.shape(k), stride, padding).expect("conv geometry was validated forward");
        let data = kernels::conv2d_input_grad(self.value(g).data(), self.value(k).data(), &geom);
        let value = Tensor::from_parts(x_shape.to_vec(), data);
        self.push(value, Op::ConvInputGrad { g, k, stride, padding })
    }

    fn conv_kernel_grad(&mut self, x: Var, g: Var, k_shape: &[usize], stride: usize, padding: usize) -> Var {
        let geom = ConvGeom::new(self.shape(x), k_shape, stride, padding).expect("conv geometry was validated forward");
        let data = kernels::conv2d_kernel_grad(self.value(x).data(), self.value(g).data(), &geom);
        let value = Tensor::from_parts(k_shape.to_vec(), data);
        self.push(value, Op::ConvKernelGrad { x, g, stride, padding })
    }

    // ---- normalisation and losses ------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Input(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x, axis)))
    }

    /// `-log softmax(logits)[label]` for a 1-D logit vector.
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 1 {
            return dim_err("cross_entropy_logits", shape, &[]);
        }
        if label >= shape[0] {
            return Err(Error::Input(format!("label {label} out of range for {} classes", shape[0])));
        }
        let z = self.value(logits).data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, label)))
    }

    // ---- reductions --------------------------------------------------------

    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        if axes.windows(2).any(|w| w[0] == w[1]) || axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::Input(format!("invalid reduction axes {axes:?} for {shape:?}")));
        }
        if axes.is_empty() {
            return Ok(x);
        }
        match op {
            ReduceOp::Sum => Ok(self.sum_axes(x, &axes)),
            ReduceOp::Mean => {
                let n: usize = axes.iter().map(|&a| shape[a]).product();
                let s = self.sum_axes(x, &axes);
                Ok(self.div_scalar(s, n as f64))
            }
            ReduceOp::Max => {
                let (map, reduced) = index::reduce_map(&shape, &axes);
                let n_out: usize = reduced.iter().product();
                let src = self.value(x).data();
                let mut best: Vec<Option<usize>> = vec![None; n_out];
                for (i, &r) in map.iter().enumerate() {
                    match best[r] {
                        Some(j) if src[i] <= src[j] => {}
                        _ => best[r] = Some(i),
                    }
                }
                let idx: Vec<usize> = best.into_iter().map(|b| b.expect("non-empty reduction")).collect();
                self.gather(x, idx.into(), reduced)
            }
        }
    }

    fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Var {
        let (map, reduced) = index::reduce_map(self.shape(x), axes);
        let mut out = vec![0.0; reduced.iter().product()];
        for (v, &r) in self.value(x).data().iter().zip(&map) {
            out[r] += v;
        }
        self.push(Tensor::from_parts(reduced, out), Op::Sum(x, axes.to_vec()))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if axes.is_empty() {
            return x;
        }
        self.sum_axes(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.div_scalar(s, n as f64)
    }

    // ---- shape manipulation ------------------------------------------------

    /// `out[i] = x[idx[i]]` over flat positions, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != idx.len() || idx.iter().any(|&i| i >= n) {
            return dim_err("gather", self.shape(x), &shape);
        }
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gather(x, idx)))
    }

    fn scatter_add(&mut self, x: Var, idx: Arc<[usize]>, shape: Vec<usize>) -> Var {
        let mut out = vec![0.0; shape.iter().product()];
        for (v, &i) in self.value(x).data().iter().zip(idx.iter()) {
            out[i] += v;
        }
        self.push(Tensor::from_parts(shape, out), Op::ScatterAdd(x, idx))
    }

    /// Right-aligned broadcast, as in numpy.
    pub fn expand_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let Some(map) = index::expand_map(self.shape(x), shape) else {
            return dim_err("expand", self.shape(x), shape);
        };
        self.gather(x, map.into(), shape.to_vec())
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return dim_err("permute", shape, perm);
        }
        let (map, out) = index::permute_map(shape, perm);
        self.gather(x, map.into(), out)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err("narrow", shape, &[axis, start, len]);
        }
        let (map, out) = index::narrow_map(shape, axis, start, len);
        self.gather(x, map.into(), out)
    }

    /// Slice `i` along axis 0, with that axis removed.
    pub fn select(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.narrow(x, 0, i, 1)?;
        let shape = self.shape(s)[1..].to_vec();
        self.reshape(s, &shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let value = self.value(x).reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, &[n])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Input("concat of an empty list".into()));
        };
        if xs.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err("concat", &base, &[axis]);
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dim_err("concat", &base, s);
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis)))
    }

    // ---- differentiation ---------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires a gradient, as graph values. With `create_graph` the gradient
    /// computation is itself recorded and can be differentiated again.
    fn gradient_vars(&mut self, loss: Var, create_graph: bool) -> Result<Vec<Option<Var>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let saved = self.recording;
        self.recording = create_graph;
        let mut grads: Vec<Option<Var>> = vec![None; loss.0 + 1];
        let seed = Tensor::ones(self.shape(loss).to_vec());
        grads[loss.0] = Some(self.constant(seed));
        let mut visits = 0;
        let result = (|| {
            for i in (0..=loss.0).rev() {
                let Some(g) = grads[i] else { continue };
                if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                    continue;
                }
                visits += 1;
                for (input, contribution) in self.vjp(Var(i), g)? {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    grads[input.0] = Some(match grads[input.0] {
                        None => contribution,
                        Some(acc) => self.add(acc, contribution)?,
                    });
                }
            }
            Ok(())
        })();
        self.recording = saved;
        self.last_visits = visits;
        result.map(|_| grads)
    }

    /// Reverse pass from a scalar loss, accumulating into the gradient of
    /// every `requires_grad` leaf. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.gradient_vars(loss, false)?;
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let gv = self.nodes[g.0].value.clone();
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.axpy(1.0, &gv),
                None => node.grad = Some(gv),
            }
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to `wrt` as graph values that can be
    /// differentiated again. Unreached inputs get a zero constant.
    pub fn grad_of(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let grads = self.gradient_vars(loss, true)?;
        Ok(wrt
            .iter()
            .map(|w| {
                grads.get(w.0).copied().flatten().unwrap_or_else(|| {
                    let z = Tensor::zeros(self.shape(*w).to_vec());
                    self.constant(z)
                })
            })
            .collect())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated gradient, or zeros for a value no loss has reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Vector-Jacobian product of node `out` against upstream gradient `g`,
    /// expressed with graph operations.
    fn vjp(&mut self, out: Var, g: Var) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[out.0].op.clone();
        let rg = |s: &Self, v: Var| s.nodes[v.0].requires_grad;
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((a, g));
                res.push((b, g));
            }
            Op::Sub(a, b) => {
                res.push((a, g));
                if rg(self, b) {
                    res.push((b, self.scale(g, -1.0)));
                }
            }
            Op::Mul(a, b) => {
                if rg(self, a) {
                    res.push((a, self.mul(g, b)?));
                }
                if rg(self, b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Op::Affine(x, a) => res.push((x, self.scale(g, a))),
            Op::DivScalar(x, d) => res.push((x, self.div_scalar(g, d))),
            Op::Relu(x) => res.push((x, self.relu_mask(g, x))),
            Op::ReluMask(src, mask) => res.push((src, self.relu_mask(g, mask))),
            Op::Sigmoid(x) => {
                let one_minus = self.affine(out, -1.0, 1.0);
                let slope = self.mul(out, one_minus)?;
                res.push((x, self.mul(g, slope)?));
            }
            Op::MatMul(a, b) => {
                if rg(self, a) {
                    let bt = self.transpose(b)?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if rg(self, b) {
                    let at = self.transpose(a)?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Op::Softmax(x, axis) => {
                let gy = self.mul(g, out)?;
                let s = self.sum_axes(gy, &[axis]);
                let (map, _) = index::reduce_map(self.shape(out), &[axis]);
                let shape = self.shape(out).to_vec();
                let se = self.gather(s, map.into(), shape)?;
                let centered = self.sub(g, se)?;
                res.push((x, self.mul(out, centered)?));
            }
            Op::Conv2d { x, k, stride, padding } => {
                if rg(self, x) {
                    let xs = self.shape(x).to_vec();
                    res.push((x, self.conv_input_grad(g, k, &xs, stride, padding)));
                }
                if rg(self, k) {
                    let ks = self.shape(k).to_vec();
                    res.push((k, self.conv_kernel_grad(x, g, &ks, stride, padding)));
                }
            }
            Op::ConvInputGrad { g: up, k, stride, padding } => {
                // out = C_x^T(up; k); linear in both operands.
                if rg(self, up) {
                    res.push((up, self.conv2d(g, k, stride, padding)?));
                }
                if rg(self, k) {
                    let ks = self.shape(k).to_vec();
                    res.push((k, self.conv_kernel_grad(g, up, &ks, stride, padding)));
                }
            }
            Op::ConvKernelGrad { x, g: up, stride, padding } => {
                if rg(self, x) {
                    let xs = self.shape(x).to_vec();
                    res.push((x, self.conv_input_grad(up, g, &xs, stride, padding)));
                }
                if rg(self, up) {
                    res.push((up, self.conv2d(x, g, stride, padding)?));
                }
            }
            Op::Sum(x, axes) => {
                let (map, _) = index::reduce_map(self.shape(x), &axes);
                let shape = self.shape(x).to_vec();
                res.push((x, self.gather(g, map.into(), shape)?));
            }
            Op::Gather(x, idx) => {
                let shape = self.shape(x).to_vec();
                res.push((x, self.scatter_add(g, idx, shape)));
            }
            Op::ScatterAdd(x, idx) => {
                let shape = self.shape(x).to_vec();
                res.push((x, self.gather(g, idx, shape)?));
            }
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for x in xs {
                    let len = self.shape(x)[axis];
                    if rg(self, x) {
                        res.push((x, self.narrow(g, axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                res.push((x, self.reshape(g, &shape)?));
            }
            Op::CrossEntropy(x, label) => {
                let p = self.softmax(x, 0)?;
                let m = self.shape(x)[0];
                let onehot = self.constant(Tensor::from_fn([m], |i| if i == label { 1.0 } else { 0.0 }));
                let d = self.sub(p, onehot)?;
                res.push((x, self.mul(d, g)?));
            }
        }
        Ok(res)
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
