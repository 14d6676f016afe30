//! Reverse-mode automatic differentiation over a recorded graph.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its output, and appends a node naming its inputs; inputs always
//! precede the node that consumes them, so a single sweep in reverse append
//! order visits each node once and sees its full upstream gradient.
//! Gradients accumulate additively on fan-out.
//!
//! ```
//! use dinet::graph::Graph;
//! use dinet::tensor::Tensor;
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::new(&[1], vec![2.0]).unwrap());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
//! ```

use crate::error::{Error, Result};
use crate::nn::batchnorm::{self, BnSaved};
use crate::nn::conv::{self, ConvDims, ConvGeometry};
use crate::nn::pool::{self, PoolDims, PoolKind};
use crate::nn::{dot, loss, Activation};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    Elementwise {
        kind: Elementwise,
        a: Var,
        b: Var,
        /// `b` is a `[C]` vector broadcast along the trailing axis of `a`.
        broadcast: bool,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Activation(Var, Activation),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Pool {
        x: Var,
        dims: PoolDims,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Rows {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Scale(Var, T),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    GradientReversal {
        x: Var,
        lambda: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A free differentiable leaf not owned by any parameter store.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a snapshot of a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.push(value, Op::Param(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(parameter, gradient)` pairs from the last backward pass, in
    /// append order. A parameter recorded twice appears twice.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.nodes
            .iter()
            .zip(&self.grads)
            .filter_map(|(node, g)| match (&node.op, g) {
                (Op::Param(id), Some(g)) => Some((*id, g)),
                _ => None,
            })
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = if va.shape() == vb.shape() {
            false
        } else if vb.ndim() == 1 && va.shape().last() == Some(&vb.shape()[0]) {
            true
        } else {
            return Err(Error::shape(format!(
                "elementwise {kind:?} of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        };
        let c = vb.numel();
        let out: Vec<T> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if broadcast { vb.data()[i % c] } else { vb.data()[i] };
                match kind {
                    Elementwise::Add => x + y,
                    Elementwise::Sub => x - y,
                    Elementwise::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(va.shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::Elementwise {
                kind,
                a,
                b,
                broadcast,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(format!(
                "matmul of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = matmul_nn(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.ndim() != 2 || vw.ndim() != 2 || vx.shape()[1] != vw.shape()[1] {
            return Err(Error::shape(format!(
                "linear input {:?} against weight {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        let (n, fin, fout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [fout] {
                return Err(Error::shape(format!(
                    "linear bias {:?} for {fout} outputs",
                    self.value(b).shape()
                )));
            }
        }
        let (xd, wd) = (vx.data(), vw.data());
        let bias = b.map(|b| self.value(b).data());
        let mut out = Vec::with_capacity(n * fout);
        for i in 0..n {
            let row = &xd[i * fin..(i + 1) * fin];
            for o in 0..fout {
                let mut v = dot(row, &wd[o * fin..(o + 1) * fin]);
                if let Some(bias) = bias {
                    v = v + bias[o];
                }
                out.push(v);
            }
        }
        let value = Tensor::new(&[n, fout], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        if act == Activation::Identity {
            return Ok(x);
        }
        let value = self.value(x).map(|v| act.apply(v));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Activation(x, act), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geometry: ConvGeometry) -> Result<Var> {
        let dims = ConvDims::infer(self.value(x).shape(), self.value(w).shape(), geometry)?;
        if let Some(b) = b {
            if self.value(b).shape() != [dims.c_out] {
                return Err(Error::shape(format!(
                    "conv bias {:?} for {} output channels",
                    self.value(b).shape(),
                    dims.c_out
                )));
            }
        }
        let out = conv::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let value = Tensor::new(&dims.output_shape(), out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv3d { x, w, b, dims }, rg))
    }

    /// Batch normalization with batch statistics over every axis but axis 1.
    /// Returns the output and the per-channel `(mean, biased variance)`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let vx = self.value(x);
        let c = check_bn_shapes(vx.shape(), self.value(gamma), self.value(beta))?;
        let (out, saved, mean, var) = batchnorm::forward_train(
            vx,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        debug_assert_eq!(mean.len(), c);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                saved,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let vx = self.value(x);
        let c = check_bn_shapes(vx.shape(), self.value(gamma), self.value(beta))?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("running statistics do not match channels"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let out = batchnorm::forward_eval(
            vx,
            self.value(gamma).data(),
            self.value(beta).data(),
            mean,
            &inv_std,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    pub fn pool3d(
        &mut self,
        x: Var,
        kind: PoolKind,
        window: [usize; 3],
        stride: [usize; 3],
    ) -> Result<Var> {
        let dims = PoolDims::infer(self.value(x).shape(), window, stride)?;
        let (out, argmax) = pool::forward(self.value(x).data(), &dims, kind);
        let value = Tensor::new(&dims.output_shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Pool {
                x,
                dims,
                kind,
                argmax,
            },
            rg,
        ))
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() < 3 {
            return Err(Error::shape(format!(
                "global average pool needs [N, C, ...], got {:?}",
                vx.shape()
            )));
        }
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        let plane = vx.numel() / (n * c);
        let scale = T::from_f64((plane) as f64).recip();
        let out: Vec<T> = vx
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).rows(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Rows { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let value = Tensor::scalar(vx.sum() / T::from_f64((vx.numel()) as f64));
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.ndim() != 2 || vl.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "logits {:?} for {} labels",
                vl.shape(),
                labels.len()
            )));
        }
        let k = vl.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let (value, probs) = loss::softmax_cross_entropy(vl.data(), labels, k);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `σ(logit)` against 0/1 targets, in the
    /// numerically stable form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[u8]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.numel() != targets.len() || vl.shape()[0] != targets.len() {
            return Err(Error::shape(format!(
                "domain logits {:?} for {} targets",
                vl.shape(),
                targets.len()
            )));
        }
        if targets.iter().any(|&d| d > 1) {
            return Err(Error::invalid("domain targets must be 0 or 1"));
        }
        let targets: Vec<T> = targets.iter().map(|&d| T::from_f64(d as f64)).collect();
        let value = loss::bce_with_logits(vl.data(), &targets);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(value), Op::BceWithLogits { logits, targets }, rg))
    }

    /// Identity on the forward pass; scales the incoming gradient by
    /// `−lambda` on the backward pass.
    pub fn gradient_reversal(&mut self, x: Var, lambda: T) -> Result<Var> {
        if !(lambda >= T::zero()) {
            return Err(Error::invalid(format!("reversal coefficient {lambda} must be ≥ 0")));
        }
        let value = self.value(x).clone();
        let rg = self.rg(x);
        Ok(self.push(value, Op::GradientReversal { x, lambda }, rg))
    }

    /// Computes `∂loss/∂v` for every node that requires gradients.
    ///
    /// Gradients from an earlier call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (target, contribution) in self.backprop_node(node, &g)? {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.accumulate(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Input-gradient contributions of one node given its output gradient.
    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::Elementwise {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (va, vb) = (val(*a), val(*b));
                let c = vb.numel();
                let bv = |i: usize| if *broadcast { vb.data()[i % c] } else { vb.data()[i] };
                if rg(*a) {
                    let ga: Vec<T> = match kind {
                        Elementwise::Add | Elementwise::Sub => gd.to_vec(),
                        Elementwise::Mul => gd.iter().enumerate().map(|(i, &g)| g * bv(i)).collect(),
                    };
                    out.push((*a, Tensor::new(va.shape(), ga)?));
                }
                if rg(*b) {
                    let per_elem = |i: usize, g: T| match kind {
                        Elementwise::Add => g,
                        Elementwise::Sub => -g,
                        Elementwise::Mul => g * va.data()[i],
                    };
                    let gb = if *broadcast {
                        let mut acc = vec![T::zero(); c];
                        for (i, &g) in gd.iter().enumerate() {
                            acc[i % c] = acc[i % c] + per_elem(i, g);
                        }
                        acc
                    } else {
                        gd.iter().enumerate().map(|(i, &g)| per_elem(i, g)).collect()
                    };
                    out.push((*b, Tensor::new(vb.shape(), gb)?));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if rg(*a) {
                    // g · bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    for i in 0..m {
                        for j in 0..k {
                            ga[i * k + j] = dot(&gd[i * n..(i + 1) * n], &vb.data()[j * n..(j + 1) * n]);
                        }
                    }
                    out.push((*a, Tensor::new(&[m, k], ga)?));
                }
                if rg(*b) {
                    // aᵀ · g
                    let mut gb = vec![T::zero(); k * n];
                    for i in 0..m {
                        for j in 0..k {
                            let aij = va.data()[i * k + j];
                            let row = &mut gb[j * n..(j + 1) * n];
                            for (r, &gv) in row.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                                *r = *r + aij * gv;
                            }
                        }
                    }
                    out.push((*b, Tensor::new(&[k, n], gb)?));
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (n, fin, fout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                if rg(*x) {
                    // g · W
                    let mut gx = vec![T::zero(); n * fin];
                    for i in 0..n {
                        let row = &mut gx[i * fin..(i + 1) * fin];
                        for o in 0..fout {
                            let gv = gd[i * fout + o];
                            for (r, &wv) in row.iter_mut().zip(&vw.data()[o * fin..(o + 1) * fin]) {
                                *r = *r + gv * wv;
                            }
                        }
                    }
                    out.push((*x, Tensor::new(vx.shape(), gx)?));
                }
                if rg(*w) {
                    // gᵀ · x
                    let mut gw = vec![T::zero(); fout * fin];
                    for i in 0..n {
                        let xrow = &vx.data()[i * fin..(i + 1) * fin];
                        for o in 0..fout {
                            let gv = gd[i * fout + o];
                            for (r, &xv) in gw[o * fin..(o + 1) * fin].iter_mut().zip(xrow) {
                                *r = *r + gv * xv;
                            }
                        }
                    }
                    out.push((*w, Tensor::new(vw.shape(), gw)?));
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    let mut gb = vec![T::zero(); fout];
                    for row in gd.chunks(fout) {
                        for (acc, &gv) in gb.iter_mut().zip(row) {
                            *acc = *acc + gv;
                        }
                    }
                    out.push((b, Tensor::new(&[fout], gb)?));
                }
            }
            Op::Activation(x, act) => {
                let y = node.value.data();
                let gx: Vec<T> = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * act.derivative_from_output(y))
                    .collect();
                out.push((*x, Tensor::new(g.shape(), gx)?));
            }
            Op::Conv3d { x, w, b, dims } => {
                if rg(*x) {
                    let mut gx = conv::conv3d_backward_input(gd, val(*w).data(), dims);
                    if crate::gradcheck::fault_active(crate::gradcheck::Fault::Conv3dBackwardSign) {
                        gx.iter_mut().for_each(|v| *v = -*v);
                    }
                    out.push((*x, Tensor::new(val(*x).shape(), gx)?));
                }
                let need_b = b.is_some_and(|b| rg(b));
                if rg(*w) || need_b {
                    let (gw, gb) = conv::conv3d_backward_params(gd, val(*x).data(), dims);
                    if rg(*w) {
                        out.push((*w, Tensor::new(val(*w).shape(), gw)?));
                    }
                    if let Some(b) = b.filter(|_| need_b) {
                        out.push((b, Tensor::new(&[dims.c_out], gb)?));
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (gx, ggamma, gbeta) = batchnorm::backward_train(g, val(*gamma).data(), saved);
                if rg(*x) {
                    out.push((*x, gx));
                }
                if rg(*gamma) {
                    out.push((*gamma, Tensor::new(val(*gamma).shape(), ggamma)?));
                }
                if rg(*beta) {
                    out.push((*beta, Tensor::new(val(*beta).shape(), gbeta)?));
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (gx, ggamma, gbeta) =
                    batchnorm::backward_eval(g, val(*x), val(*gamma).data(), mean, inv_std);
                if rg(*x) {
                    out.push((*x, gx));
                }
                if rg(*gamma) {
                    out.push((*gamma, Tensor::new(val(*gamma).shape(), ggamma)?));
                }
                if rg(*beta) {
                    out.push((*beta, Tensor::new(val(*beta).shape(), gbeta)?));
                }
            }
            Op::Pool {
                x,
                dims,
                kind,
                argmax,
            } => {
                let gx = pool::backward(gd, dims, *kind, argmax);
                out.push((*x, Tensor::new(val(*x).shape(), gx)?));
            }
            Op::GlobalAvgPool(x) => {
                let vx = val(*x);
                let (n, c) = (vx.shape()[0], vx.shape()[1]);
                let plane = vx.numel() / (n * c);
                let scale = T::from_f64((plane) as f64).recip();
                let mut gx = Vec::with_capacity(vx.numel());
                for &gv in gd {
                    gx.extend(std::iter::repeat_n(gv * scale, plane));
                }
                out.push((*x, Tensor::new(vx.shape(), gx)?));
            }
            Op::Rows { x, start } => {
                let vx = val(*x);
                let stride = vx.numel() / vx.shape()[0];
                let mut gx = vec![T::zero(); vx.numel()];
                gx[start * stride..start * stride + gd.len()].copy_from_slice(gd);
                out.push((*x, Tensor::new(vx.shape(), gx)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(val(*x).shape(), gd[0])));
            }
            Op::Mean(x) => {
                let vx = val(*x);
                let v = gd[0] / T::from_f64((vx.numel()) as f64);
                out.push((*x, Tensor::full(vx.shape(), v)));
            }
            Op::Scale(x, factor) => {
                out.push((*x, g.map(|v| v * *factor)));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let gl = loss::softmax_cross_entropy_grad(probs, labels, gd[0]);
                out.push((*logits, Tensor::new(val(*logits).shape(), gl)?));
            }
            Op::BceWithLogits { logits, targets } => {
                let gl = loss::bce_with_logits_grad(val(*logits).data(), targets, gd[0]);
                out.push((*logits, Tensor::new(val(*logits).shape(), gl)?));
            }
            Op::GradientReversal { x, lambda } => {
                let factor = -*lambda;
                out.push((*x, g.map(|v| v * factor)));
            }
        }
        Ok(out)
    }
}

fn check_bn_shapes<T: Scalar>(x: &[usize], gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    if x.len() < 2 {
        return Err(Error::shape(format!("batch norm needs [N, C, ...], got {x:?}")));
    }
    let c = x[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batch norm affine {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for j in 0..k {
            let aij = a[i * k + j];
            for (r, &bv) in row.iter_mut().zip(&b[j * n..(j + 1) * n]) {
                *r = *r + aij * bv;
            }
        }
    }
    out
}
