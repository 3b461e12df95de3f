use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{col2im, gemm, gemm_nt_acc, gemm_tn, im2col, sigmoid};
use super::{LinearOperator, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    /// Leaf, or an op whose inputs need no gradient.
    Const,
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy { x: usize, s: usize },
    Silu(usize),
    Select { x: usize, i: usize },
    Sum(usize),
    Mse(usize, usize),
    Concat(Vec<usize>),
    AddChannelBias { x: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    Conv2d { x: usize, w: usize, b: usize, k: usize, cols: Option<Vec<f64>> },
    LinOp { x: usize, op: Arc<dyn LinearOperator>, adjoint: bool },
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic record of executed operations. Rebuilt for every forward pass and
/// consumed by [`Tape::backward`].
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the trainable leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Vec<f64>>,
    visit_order: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.index).map(|g| g.as_slice())
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: fresh_id(), nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape on which every leaf is a constant; nothing is kept for backward.
    pub fn no_grad() -> Self {
        Tape { id: fresh_id(), nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable is not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.idx(v)?].requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t.detached(), op: Op::Const, requires_grad: false });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    /// A trainable leaf. On a no-grad tape this is a constant.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let trainable = self.grad_enabled;
        let op = if trainable { Op::Param } else { Op::Const };
        self.nodes.push(Node { value: t.detached(), op, requires_grad: trainable });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn binary_shapes(&self, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(Error::shape(sa, sb));
        }
        Ok((ia, ib))
    }

    fn zip_map(&self, ia: usize, ib: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let a = &self.nodes[ia].value;
        let b = &self.nodes[ib].value;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor { shape: a.shape().to_vec(), data, grad: None }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_shapes(a, b)?;
        let v = self.zip_map(ia, ib, |x, y| x + y);
        Ok(self.push(v, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_shapes(a, b)?;
        let v = self.zip_map(ia, ib, |x, y| x - y);
        Ok(self.push(v, Op::Sub(ia, ib), &[ia, ib]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_shapes(a, b)?;
        let v = self.zip_map(ia, ib, |x, y| x * y);
        Ok(self.push(v, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        let v = Tensor { shape: src.shape().to_vec(), data: src.data().iter().map(|x| x * c).collect(), grad: None };
        Ok(self.push(v, Op::Scale(ia, c), &[ia]))
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.idx(x)?, self.idx(s)?);
        let c = self.nodes[is].value.item()?;
        let src = &self.nodes[ix].value;
        let v = Tensor { shape: src.shape().to_vec(), data: src.data().iter().map(|x| x * c).collect(), grad: None };
        Ok(self.push(v, Op::ScaleBy { x: ix, s: is }, &[ix, is]))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        let v = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| x * sigmoid(x)).collect(),
            grad: None,
        };
        Ok(self.push(v, Op::Silu(ia), &[ia]))
    }

    /// Element `i` of a flat view of `x`, as a 0-d tensor.
    pub fn select(&mut self, x: Var, i: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let src = &self.nodes[ix].value;
        let value = *src
            .data()
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("index {i} out of range for {:?}", src.shape())))?;
        Ok(self.push(Tensor::scalar(value), Op::Select { x: ix, i }, &[ix]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), &[ia]))
    }

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_shapes(a, b)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let n = va.numel().max(1) as f64;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(ia, ib), &[ia, ib]))
    }

    /// Concatenate along the leading axis. Trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        if first.is_empty() {
            return Err(Error::InvalidArgument("cannot concat 0-d tensors".into()));
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape(&first, s));
            }
            lead += s[0];
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let v = Tensor { shape, data, grad: None };
        Ok(self.push(v, Op::Concat(idxs.clone()), &idxs))
    }

    /// Add `b[c]` to every element of channel `c` of `x[C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if vx.shape().is_empty() || vb.shape() != [vx.shape()[0]] {
            return Err(Error::shape(&vx.shape()[..1.min(vx.shape().len())], vb.shape()));
        }
        let plane = vx.numel() / vx.shape()[0];
        let mut data = vx.data().to_vec();
        for (c, chunk) in data.chunks_mut(plane.max(1)).enumerate() {
            let bias = vb.data()[c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let v = Tensor { shape: vx.shape().to_vec(), data, grad: None };
        Ok(self.push(v, Op::AddChannelBias { x: ix, b: ib }, &[ix, ib]))
    }

    /// Affine map `weight[m, n] · input[n] + bias[m]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let (vx, vw, vb) = (&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value);
        if vw.shape().len() != 2 || vx.shape() != [vw.shape()[1]] {
            return Err(Error::shape(&[vw.shape().get(1).copied().unwrap_or(0)], vx.shape()));
        }
        let (m, n) = (vw.shape()[0], vw.shape()[1]);
        if vb.shape() != [m] {
            return Err(Error::shape(&[m], vb.shape()));
        }
        let data = (0..m)
            .map(|i| {
                let row = &vw.data()[i * n..(i + 1) * n];
                row.iter().zip(vx.data()).map(|(w, x)| w * x).sum::<f64>() + vb.data()[i]
            })
            .collect();
        let v = Tensor { shape: vec![m], data, grad: None };
        Ok(self.push(v, Op::Linear { x: ix, w: iw, b: ib }, &[ix, iw, ib]))
    }

    /// Same-padded 2-D convolution (cross-correlation) with zero fill.
    /// `input[C_in, H, W]`, `kernel[C_out, C_in, k, k]` with odd `k`, `bias[C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(input)?, self.idx(kernel)?, self.idx(bias)?);
        let (vx, vw, vb) = (&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value);
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 3 {
            return Err(Error::InvalidArgument(format!("conv2d input must be [C, H, W], got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv2d kernel must be [C_out, C_in, k, k] with odd k, got {ws:?}")));
        }
        if ws[1] != xs[0] {
            return Err(Error::shape(&[ws[1]], &[xs[0]]));
        }
        let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
        if vb.shape() != [c_out] {
            return Err(Error::shape(&[c_out], vb.shape()));
        }
        let (h, w) = (xs[1], xs[2]);
        let hw = h * w;
        let cols = im2col(vx.data(), c_in, h, w, k);
        let mut out = vec![0.0; c_out * hw];
        for (c, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.fill(vb.data()[c]);
        }
        gemm(c_out, c_in * k * k, hw, vw.data(), &cols, &mut out, true);
        let keep_cols = self.grad_enabled && self.nodes[iw].requires_grad;
        let v = Tensor { shape: vec![c_out, h, w], data: out, grad: None };
        let op = Op::Conv2d { x: ix, w: iw, b: ib, k, cols: keep_cols.then_some(cols) };
        Ok(self.push(v, op, &[ix, iw, ib]))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = self.nodes[ix].value.detached().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(ix), &[ix]))
    }

    /// Apply a linear operator (or its adjoint) to `x`.
    pub fn apply_linear(&mut self, x: Var, op: Arc<dyn LinearOperator>, adjoint: bool) -> Result<Var> {
        let ix = self.idx(x)?;
        let (in_shape, out_shape) = if adjoint {
            (op.output_shape(), op.input_shape())
        } else {
            (op.input_shape(), op.output_shape())
        };
        let vx = &self.nodes[ix].value;
        if vx.numel() != in_shape.iter().product::<usize>() {
            return Err(Error::shape(&in_shape, vx.shape()));
        }
        let mut out = vec![0.0; out_shape.iter().product()];
        if adjoint {
            op.apply_adjoint(vx.data(), &mut out);
        } else {
            op.apply(vx.data(), &mut out);
        }
        let v = Tensor { shape: out_shape, data: out, grad: None };
        Ok(self.push(v, Op::LinOp { x: ix, op, adjoint }, &[ix]))
    }

    /// Reverse pass from a single-element `loss`. Consumes the recorded nodes:
    /// afterwards every `Var` of this tape is invalid and a second call errors.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Tape("backward called on a no-grad tape".into()));
        }
        let root = self.idx(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Tape(format!("loss must be a scalar, got shape {:?}", self.nodes[root].value.shape())));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let old_id = self.id;
        self.id = fresh_id();

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads = HashMap::new();
        let mut visit_order = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            if matches!(n.op, Op::Param) {
                leaf_grads.insert(i, vec![0.0; n.value.numel()]);
            }
        }
        if nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            visit_order.push(idx);
            let node = &nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param => {
                    leaf_grads.insert(idx, g);
                }
                Op::Add(a, b) => {
                    accumulate(&nodes, &mut grads, *a, |d| axpy(d, 1.0, &g));
                    accumulate(&nodes, &mut grads, *b, |d| axpy(d, 1.0, &g));
                }
                Op::Sub(a, b) => {
                    accumulate(&nodes, &mut grads, *a, |d| axpy(d, 1.0, &g));
                    accumulate(&nodes, &mut grads, *b, |d| axpy(d, -1.0, &g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    accumulate(&nodes, &mut grads, *a, |d| {
                        d.iter_mut().zip(&g).zip(vb).for_each(|((d, g), y)| *d += g * y)
                    });
                    accumulate(&nodes, &mut grads, *b, |d| {
                        d.iter_mut().zip(&g).zip(va).for_each(|((d, g), x)| *d += g * x)
                    });
                }
                Op::Scale(a, c) => accumulate(&nodes, &mut grads, *a, |d| axpy(d, *c, &g)),
                Op::ScaleBy { x, s } => {
                    let c = nodes[*s].value.data()[0];
                    let vx = nodes[*x].value.data();
                    accumulate(&nodes, &mut grads, *x, |d| axpy(d, c, &g));
                    accumulate(&nodes, &mut grads, *s, |d| {
                        d[0] += g.iter().zip(vx).map(|(g, x)| g * x).sum::<f64>()
                    });
                }
                Op::Silu(a) => {
                    let va = nodes[*a].value.data();
                    accumulate(&nodes, &mut grads, *a, |d| {
                        for ((d, g), &x) in d.iter_mut().zip(&g).zip(va) {
                            let s = sigmoid(x);
                            *d += g * s * (1.0 + x * (1.0 - s));
                        }
                    });
                }
                Op::Select { x, i } => accumulate(&nodes, &mut grads, *x, |d| d[*i] += g[0]),
                Op::Sum(a) => accumulate(&nodes, &mut grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
                Op::Mse(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let c = 2.0 * g[0] / va.len().max(1) as f64;
                    accumulate(&nodes, &mut grads, *a, |d| {
                        d.iter_mut().zip(va.iter().zip(vb)).for_each(|(d, (x, y))| *d += c * (x - y))
                    });
                    accumulate(&nodes, &mut grads, *b, |d| {
                        d.iter_mut().zip(va.iter().zip(vb)).for_each(|(d, (x, y))| *d -= c * (x - y))
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.numel();
                        accumulate(&nodes, &mut grads, p, |d| axpy(d, 1.0, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::AddChannelBias { x, b } => {
                    let plane = node.value.numel() / node.value.shape()[0];
                    accumulate(&nodes, &mut grads, *x, |d| axpy(d, 1.0, &g));
                    accumulate(&nodes, &mut grads, *b, |d| {
                        for (c, chunk) in g.chunks(plane.max(1)).enumerate() {
                            d[c] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                Op::Linear { x, w, b } => {
                    let (vx, vw) = (nodes[*x].value.data(), nodes[*w].value.data());
                    let n = vx.len();
                    accumulate(&nodes, &mut grads, *x, |d| {
                        for (i, gi) in g.iter().enumerate() {
                            axpy(d, *gi, &vw[i * n..(i + 1) * n]);
                        }
                    });
                    accumulate(&nodes, &mut grads, *w, |d| {
                        for (i, gi) in g.iter().enumerate() {
                            axpy(&mut d[i * n..(i + 1) * n], *gi, vx);
                        }
                    });
                    accumulate(&nodes, &mut grads, *b, |d| axpy(d, 1.0, &g));
                }
                Op::Conv2d { x, w, b, k, cols } => {
                    let xs = nodes[*x].value.shape();
                    let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
                    let hw = h * wd;
                    let c_out = node.value.shape()[0];
                    let ckk = c_in * k * k;
                    let vw = nodes[*w].value.data();
                    accumulate(&nodes, &mut grads, *b, |d| {
                        for (c, chunk) in g.chunks(hw).enumerate() {
                            d[c] += chunk.iter().sum::<f64>();
                        }
                    });
                    if let Some(cols) = cols {
                        accumulate(&nodes, &mut grads, *w, |d| gemm_nt_acc(c_out, hw, ckk, &g, cols, d));
                    }
                    if nodes[*x].requires_grad {
                        let dcols = gemm_tn(ckk, c_out, hw, vw, &g);
                        accumulate(&nodes, &mut grads, *x, |d| col2im(&dcols, c_in, h, wd, *k, d));
                    }
                }
                Op::LinOp { x, op, adjoint } => {
                    let mut tmp = vec![0.0; nodes[*x].value.numel()];
                    if *adjoint {
                        op.apply(&g, &mut tmp);
                    } else {
                        op.apply_adjoint(&g, &mut tmp);
                    }
                    accumulate_owned(&nodes, &mut grads, *x, tmp);
                }
                Op::Reshape(x) => accumulate_owned(&nodes, &mut grads, *x, g),
            }
        }

        Ok(Gradients { tape: old_id, grads: leaf_grads, visit_order })
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[i].requires_grad {
        return;
    }
    let buf = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]);
    f(buf);
}

/// Like [`accumulate`] with `+= v`, reusing `v` as the buffer when the slot is empty.
fn accumulate_owned(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, v: Vec<f64>) {
    if !nodes[i].requires_grad {
        return;
    }
    match &mut grads[i] {
        Some(buf) => axpy(buf, 1.0, &v),
        slot => *slot = Some(v),
    }
}
