//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Operations append nodes to a [`Graph`]; `backward` walks the tape in
//! reverse, accumulating parameter gradients into the owning [`ParamStore`].
//! Repeated `backward` calls without `zero_grads` accumulate.

use super::conv;
use super::elem::{gemm_rm, Elem};
use super::norm;
use super::pool;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a learnable parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat container of learnable parameters and their gradient buffers.
#[derive(Clone, Debug)]
pub struct ParamStore<E> {
    values: Vec<Tensor<E>>,
    grads: Vec<Tensor<E>>,
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, value: Tensor<E>) -> ParamId {
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<E> {
        &self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = E::zero());
        }
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub(crate) fn values(&self) -> &[Tensor<E>] {
        &self.values
    }

    pub fn cast<F: Elem>(&self) -> ParamStore<F> {
        ParamStore {
            values: self.values.iter().map(|t| t.cast()).collect(),
            grads: self.grads.iter().map(|t| t.cast()).collect(),
        }
    }
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Batch-norm execution mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running batch-norm statistics, one pair of per-channel vectors.
#[derive(Clone, Debug)]
pub struct BnStats<E> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

impl<E: Elem> BnStats<E> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::filled(&[channels], E::one()),
        }
    }

    pub fn cast<F: Elem>(&self) -> BnStats<F> {
        BnStats {
            mean: self.mean.cast(),
            var: self.var.cast(),
        }
    }
}

/// Deferred running-stat update produced by a train-mode batch-norm node.
/// Carries the raw batch statistics; the owner folds them into its running
/// stats with `momentum`, so several forwards through the same layer in one
/// graph (e.g. one per task head) each contribute.
pub struct BnUpdate<E> {
    pub stats_index: usize,
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
    pub momentum: E,
}

pub(crate) enum Op<E> {
    Leaf {
        requires_grad: bool,
    },
    Param(ParamId),
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    /// Generic max pooling; `argmax` holds the flat input index per output cell.
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2x {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<E>,
        inv_std: Tensor<E>,
        train: bool,
    },
    Relu {
        input: Var,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        target: Tensor<E>,
        probs: Tensor<E>,
    },
    L1Loss {
        pred: Var,
        target: Tensor<E>,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    ElemMul {
        a: Var,
        b: Var,
    },
    /// Weighted sum of scalar nodes.
    WeightedSum {
        terms: Vec<(Var, E)>,
    },
}

pub(crate) struct Node<E> {
    pub value: Tensor<E>,
    pub op: Op<E>,
    pub needs_grad: bool,
}

/// A single forward tape. Build ops, then call [`Graph::backward`] on a
/// scalar loss node.
pub struct Graph<E> {
    pub(crate) nodes: Vec<Node<E>>,
    bn_updates: Vec<BnUpdate<E>>,
    leaf_grads: Vec<Option<Tensor<E>>>,
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bn_updates: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> E {
        self.nodes[v.0].value.data()[0]
    }

    /// Constant (or gradient-checked) input tensor.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { requires_grad }, requires_grad)
    }

    pub fn input(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a parameter value onto the tape; its gradient flows back into
    /// the store on `backward`.
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let value = conv::conv3d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
        )?;
        let ng = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(value, Op::Conv3d { input, kernel, bias }, ng))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let value = conv::conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
        )?;
        let ng = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }, ng))
    }

    /// 1x2x2 max pooling over [B,T,H,W,C].
    pub fn maxpool3d_spatial(&mut self, input: Var) -> Result<Var> {
        let (value, argmax) = pool::maxpool3d_spatial(self.value(input))?;
        let ng = self.needs(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, ng))
    }

    /// Global temporal + 2x2 spatial max pooling: [B,T,H,W,C] -> [B,1,H/2,W/2,C].
    pub fn maxpool3d_global_temporal(&mut self, input: Var) -> Result<Var> {
        let (value, argmax) = pool::maxpool3d_global_temporal(self.value(input))?;
        let ng = self.needs(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, ng))
    }

    /// 2x2 max pooling over [B,H,W,C].
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (value, argmax) = pool::maxpool2d(self.value(input))?;
        let ng = self.needs(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, ng))
    }

    /// Nearest-neighbor 2x upsampling over [B,H,W,C].
    pub fn upsample_nearest_2x(&mut self, input: Var) -> Result<Var> {
        let value = pool::upsample2x(self.value(input))?;
        let ng = self.needs(input);
        Ok(self.push(value, Op::Upsample2x { input }, ng))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: E,
        momentum: E,
        mode: BnMode,
        stats: &BnStats<E>,
        stats_index: usize,
    ) -> Result<Var> {
        let out = norm::batch_norm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            eps,
            mode,
            stats,
        )?;
        if mode == BnMode::Train {
            self.bn_updates.push(BnUpdate {
                stats_index,
                mean: out.mean.clone(),
                var: out.var.clone(),
                momentum,
            });
        }
        let ng = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out.value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: out.mean,
                inv_std: out.inv_std,
                train: mode == BnMode::Train,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(E::zero()));
        let ng = self.needs(input);
        self.push(value, Op::Relu { input }, ng)
    }

    /// Flattens all non-batch axes, then x @ w + b. w: [D,U], b: [U].
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let batch = x.shape()[0];
        let d: usize = x.shape()[1..].iter().product();
        if w.shape().len() != 2 || w.shape()[0] != d {
            return Err(Error::shape(format!(
                "fully_connected: input flattens to {} features, weight is {:?}",
                d,
                w.shape()
            )));
        }
        let u = w.shape()[1];
        if b.shape() != [u] {
            return Err(Error::shape(format!(
                "fully_connected: bias {:?} does not match {} units",
                b.shape(),
                u
            )));
        }
        let mut out = Tensor::zeros(&[batch, u]);
        gemm_rm(batch, d, u, E::one(), x.data(), w.data(), E::zero(), out.data_mut());
        for row in 0..batch {
            let o = &mut out.data_mut()[row * u..(row + 1) * u];
            for (ov, bv) in o.iter_mut().zip(b.data()) {
                *ov += *bv;
            }
        }
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::FullyConnected { input, weight, bias }, ng))
    }

    /// Row-wise softmax over [B,K].
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 2 {
            return Err(Error::shape(format!(
                "softmax expects [B,K], got {:?}",
                x.shape()
            )));
        }
        let value = norm::softmax_rows(x);
        let ng = self.needs(input);
        Ok(self.push(value, Op::Softmax { input }, ng))
    }

    /// Mean over the batch of -sum(y * log softmax(logits)).
    pub fn cross_entropy_loss(&mut self, logits: Var, target: &Tensor<E>) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != target.shape() || x.shape().len() != 2 {
            return Err(Error::shape(format!(
                "cross_entropy: logits {:?} vs target {:?}",
                x.shape(),
                target.shape()
            )));
        }
        let k = x.shape()[1];
        for row in target.data().chunks(k) {
            let ones = row.iter().filter(|&&v| v == E::one()).count();
            let zeros = row.iter().filter(|&&v| v == E::zero()).count();
            if ones != 1 || zeros != k - 1 {
                return Err(Error::arg(format!("target row {:?} is not one-hot", row)));
            }
        }
        let probs = norm::softmax_rows(x);
        let b = x.shape()[0];
        let mut loss = E::zero();
        for (p, y) in probs.data().iter().zip(target.data()) {
            if *y == E::one() {
                loss -= p.max(E::from_f64(1e-300)).ln();
            }
        }
        loss = loss / E::from_f64(b as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: target.clone(),
                probs,
            },
            ng,
        ))
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<E>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(format!(
                "l1_loss: pred {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let n = E::from_f64(p.numel() as f64);
        let loss: E = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<E>()
            / n;
        let ng = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1Loss {
                pred,
                target: target.clone(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape)?;
        let ng = self.needs(input);
        Ok(self.push(value, Op::Reshape { input }, ng))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: E = self.value(input).data().iter().copied().sum();
        let ng = self.needs(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, ng)
    }

    pub fn elem_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("elem_mul shape mismatch"));
        }
        let value = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ElemMul { a, b }, ng))
    }

    /// Weighted sum of scalar nodes; rejects non-scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, E)]) -> Result<Var> {
        let mut total = E::zero();
        for &(v, w) in terms {
            if !self.value(v).is_scalar() {
                return Err(Error::arg("weighted_sum term is not scalar"));
            }
            total += self.scalar_value(v) * w;
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            ng,
        ))
    }

    /// Drains the running-stat updates produced by train-mode batch norms.
    /// Hash of the piecewise-linear active set of this forward pass: which
    /// relu inputs are positive, which pool slot wins each window, and (for
    /// l1 terms) the sign of each residual. Two evaluations at nearby
    /// parameter points are finite-difference-compatible only if their
    /// signatures match; a crossing means the loss has a kink inside the
    /// probed interval and central differences are not a valid oracle there.
    pub fn activation_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for (i, v) in self.nodes[input.0].value.data().iter().enumerate() {
                        if *v > E::zero() {
                            i.hash(&mut h);
                        }
                    }
                    u64::MAX.hash(&mut h);
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::L1Loss { pred, target } => {
                    for (i, (p, t)) in self.nodes[pred.0]
                        .value
                        .data()
                        .iter()
                        .zip(target.data())
                        .enumerate()
                    {
                        if *p > *t {
                            i.hash(&mut h);
                        }
                    }
                    u64::MAX.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<E>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Reverse pass from a scalar loss. Parameter gradients accumulate into
    /// `store`; leaf gradients are retrievable via [`Graph::leaf_grad`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<E>) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::arg(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<E>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(E::one()));
        self.leaf_grads = vec![None; n];

        let mut leaf_grads: Vec<Option<Tensor<E>>> = vec![None; n];
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &grad, &mut grads, &mut leaf_grads, store)?;
        }
        self.leaf_grads = leaf_grads;
        Ok(())
    }

    /// Gradient of the most recent backward pass w.r.t. a grad-requiring leaf.
    pub fn leaf_grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn accumulate(grads: &mut [Option<Tensor<E>>], target: Var, delta: Tensor<E>) {
        match &mut grads[target.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        node: usize,
        grad: &Tensor<E>,
        grads: &mut Vec<Option<Tensor<E>>>,
        leaf_grads: &mut [Option<Tensor<E>>],
        store: &mut ParamStore<E>,
    ) -> Result<()> {
        match &self.nodes[node].op {
            Op::Leaf { requires_grad } => {
                if *requires_grad {
                    leaf_grads[node] = Some(grad.clone());
                }
            }
            Op::Param(id) => {
                let id = *id;
                let g = &mut store.grads[id.0];
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += *b;
                }
            }
            Op::Conv3d { input, kernel, bias } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let g = conv::conv3d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[kernel.0].value,
                    grad,
                )?;
                if self.needs(input) {
                    Self::accumulate(grads, input, g.d_input);
                }
                Self::accumulate(grads, kernel, g.d_kernel);
                Self::accumulate(grads, bias, g.d_bias);
            }
            Op::Conv2d { input, kernel, bias } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let g = conv::conv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[kernel.0].value,
                    grad,
                )?;
                if self.needs(input) {
                    Self::accumulate(grads, input, g.d_input);
                }
                Self::accumulate(grads, kernel, g.d_kernel);
                Self::accumulate(grads, bias, g.d_bias);
            }
            Op::MaxPool { input, argmax } => {
                let input = *input;
                let mut d = Tensor::zeros(self.nodes[input.0].value.shape());
                for (o, &src) in argmax.iter().enumerate() {
                    d.data_mut()[src as usize] += grad.data()[o];
                }
                Self::accumulate(grads, input, d);
            }
            Op::Upsample2x { input } => {
                let input = *input;
                let d = pool::upsample2x_backward(self.nodes[input.0].value.shape(), grad)?;
                Self::accumulate(grads, input, d);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
                ..
            } => {
                let (input, gamma, beta, train) = (*input, *gamma, *beta, *train);
                let g = norm::batch_norm_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[gamma.0].value,
                    mean,
                    inv_std,
                    train,
                    grad,
                );
                if self.needs(input) {
                    Self::accumulate(grads, input, g.d_input);
                }
                Self::accumulate(grads, gamma, g.d_gamma);
                Self::accumulate(grads, beta, g.d_beta);
            }
            Op::Relu { input } => {
                let input = *input;
                let x = &self.nodes[input.0].value;
                let d = Tensor::from_vec(
                    x.shape(),
                    x.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&v, &g)| if v > E::zero() { g } else { E::zero() })
                        .collect(),
                )?;
                Self::accumulate(grads, input, d);
            }
            Op::FullyConnected { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let b = x.shape()[0];
                let d: usize = x.shape()[1..].iter().product();
                let u = w.shape()[1];
                // dW = X^T @ dY
                let mut dw = Tensor::zeros(&[d, u]);
                unsafe {
                    E::gemm(
                        d,
                        b,
                        u,
                        E::one(),
                        x.data().as_ptr(),
                        1,
                        d as isize,
                        grad.data().as_ptr(),
                        u as isize,
                        1,
                        E::zero(),
                        dw.data_mut().as_mut_ptr(),
                        u as isize,
                        1,
                    );
                }
                Self::accumulate(grads, weight, dw);
                // db = column sums of dY
                let mut db = Tensor::zeros(&[u]);
                for row in grad.data().chunks(u) {
                    for (a, g) in db.data_mut().iter_mut().zip(row) {
                        *a += *g;
                    }
                }
                Self::accumulate(grads, bias, db);
                if self.needs(input) {
                    // dX = dY @ W^T
                    let mut dx = Tensor::zeros(x.shape());
                    unsafe {
                        E::gemm(
                            b,
                            u,
                            d,
                            E::one(),
                            grad.data().as_ptr(),
                            u as isize,
                            1,
                            w.data().as_ptr(),
                            1,
                            u as isize,
                            E::zero(),
                            dx.data_mut().as_mut_ptr(),
                            d as isize,
                            1,
                        );
                    }
                    Self::accumulate(grads, input, dx);
                }
            }
            Op::Softmax { input } => {
                let input = *input;
                let y = &self.nodes[node].value;
                let k = y.shape()[1];
                let mut d = Tensor::zeros(y.shape());
                for ((drow, yrow), grow) in d
                    .data_mut()
                    .chunks_mut(k)
                    .zip(y.data().chunks(k))
                    .zip(grad.data().chunks(k))
                {
                    let dot: E = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = yv * (gv - dot);
                    }
                }
                Self::accumulate(grads, input, d);
            }
            Op::CrossEntropy { logits, target, probs } => {
                let logits = *logits;
                let b = probs.shape()[0];
                let scale = grad.data()[0] / E::from_f64(b as f64);
                let d = Tensor::from_vec(
                    probs.shape(),
                    probs
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &y)| (p - y) * scale)
                        .collect(),
                )?;
                Self::accumulate(grads, logits, d);
            }
            Op::L1Loss { pred, target } => {
                let pred = *pred;
                let p = &self.nodes[pred.0].value;
                let scale = grad.data()[0] / E::from_f64(p.numel() as f64);
                let d = Tensor::from_vec(
                    p.shape(),
                    p.data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &t)| {
                            // subgradient at 0 is 0
                            if a > t {
                                scale
                            } else if a < t {
                                -scale
                            } else {
                                E::zero()
                            }
                        })
                        .collect(),
                )?;
                Self::accumulate(grads, pred, d);
            }
            Op::Reshape { input } => {
                let input = *input;
                let d = grad
                    .clone()
                    .reshaped(self.nodes[input.0].value.shape())?;
                Self::accumulate(grads, input, d);
            }
            Op::Sum { input } => {
                let input = *input;
                let g0 = grad.data()[0];
                let d = Tensor::filled(self.nodes[input.0].value.shape(), g0);
                Self::accumulate(grads, input, d);
            }
            Op::ElemMul { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                if self.needs(a) {
                    let d = Tensor::from_vec(
                        bv.shape(),
                        bv.data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&x, &g)| x * g)
                            .collect(),
                    )?;
                    Self::accumulate(grads, a, d);
                }
                if self.needs(b) {
                    let d = Tensor::from_vec(
                        av.shape(),
                        av.data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&x, &g)| x * g)
                            .collect(),
                    )?;
                    Self::accumulate(grads, b, d);
                }
            }
            Op::WeightedSum { terms } => {
                let g0 = grad.data()[0];
                let terms = terms.clone();
                for (v, w) in terms {
                    if self.needs(v) {
                        Self::accumulate(grads, v, Tensor::scalar(g0 * w));
                    }
                }
            }
        }
        Ok(())
    }
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}
