//! Tape of recorded operations and reverse-mode differentiation over it.

use super::kernels::{self, Conv2dGeometry};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How `batch_norm` obtains its statistics.
pub enum BnMode<'a, T> {
    /// Normalize with the batch statistics. When `running` is given the
    /// running mean and variance are blended toward them:
    /// `running = momentum·running + (1 − momentum)·batch`.
    Train { running: Option<(&'a mut [T], &'a mut [T])>, momentum: T },
    /// Normalize with fixed statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: Conv2dGeometry },
    Depthwise { input: Var, weight: Var, geom: Conv2dGeometry },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    GlobalAvgPool { input: Var },
    Sigmoid { input: Var },
    Relu { input: Var },
    BatchNorm { input: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Concat { inputs: Vec<Var> },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sum { input: Var },
    Reshape { input: Var },
    Objective { input: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A single-threaded computation tape.
///
/// Leaves created with `requires_grad` receive `∂loss/∂leaf` in their grad
/// buffer on [`Graph::backward`]; repeated calls accumulate until
/// [`Graph::zero_grad`].
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Cross-correlation of `input` `[N,Cin,H,W]` with `weight` `[Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = Conv2dGeometry::new("conv2d", self.shape(input), self.shape(weight), 1, stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias must be [{}], got {:?}", geom.out_channels, self.shape(b)),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.any_grad(&[Some(input), Some(weight), bias]);
        let value = Tensor::new(geom.output_shape(), out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    /// Per-channel spatial convolution with `weight` `[C,1,k,k]`.
    pub fn depthwise_conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let channels = xs.get(1).copied().unwrap_or(0);
        if ws.len() != 4 || ws[0] != channels || ws[1] != 1 {
            return Err(Error::dim(
                "depthwise_conv2d",
                format!("axis C: weight must be [{channels},1,k,k], got {ws:?}"),
            ));
        }
        let geom = Conv2dGeometry::new("depthwise_conv2d", &xs, &ws, channels, stride, padding)?;
        let out = kernels::depthwise_forward(&geom, self.value(input).data(), self.value(weight).data());
        let rg = self.any_grad(&[Some(input), Some(weight)]);
        let value = Tensor::new(geom.output_shape(), out)?;
        Ok(self.push(value, Op::Depthwise { input, weight, geom }, rg))
    }

    /// `input` `[N,in]` times `weightᵀ` (`weight` is `[out,in]`) plus `bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [n, fin] = self.value(input).dims::<2>("linear", "input")?;
        let [fout, win] = self.value(weight).dims::<2>("linear", "weight")?;
        if fin != win {
            return Err(Error::dim("linear", format!("axis in_features: input has {fin}, weight expects {win}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(Error::dim("linear", format!("bias must be [{fout}], got {:?}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        kernels::matmul(
            n,
            fin,
            fout,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            &mut out,
            T::zero(),
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bd).for_each(|(o, &bv)| *o += bv);
            }
        }
        let rg = self.any_grad(&[Some(input), Some(weight), bias]);
        Ok(self.push(Tensor::new(vec![n, fout], out)?, Op::Linear { input, weight, bias }, rg))
    }

    /// Mean over the spatial axes: `[N,C,H,W]` → `[N,C,1,1]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims::<4>("global_avg_pool", "input")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::dim("global_avg_pool", "empty spatial extent"));
        }
        let inv = T::one() / T::from_f64(plane as f64);
        let out: Vec<T> = self.value(input).data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.any_grad(&[Some(input)]);
        Ok(self.push(Tensor::new(vec![n, c, 1, 1], out)?, Op::GlobalAvgPool { input }, rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| {
            // split on sign so large magnitudes never overflow exp
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.any_grad(&[Some(input)]);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[Some(input)]);
        self.push(value, Op::Relu { input }, rg)
    }

    /// Per-channel normalization of `[N,C,...]` over every axis but `C`,
    /// followed by the optional affine `gamma`, `beta` (each `[C]`).
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("batch_norm", format!("input must be [N,C,...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = n * inner;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if let Some(v) = v {
                if self.shape(v) != [c] {
                    return Err(Error::dim(
                        "batch_norm",
                        format!("axis C: {what} must be [{c}], got {:?}", self.shape(v)),
                    ));
                }
            }
        }
        let x = self.value(input).data();
        let batch_stats = matches!(mode, BnMode::Train { .. });
        let (mean, var) = match &mode {
            BnMode::Train { .. } => {
                if count == 0 {
                    return Err(Error::dim("batch_norm", "no elements to normalize"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv = T::one() / T::from_f64(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += x[(b * c + ch) * inner..][..inner].iter().copied().sum::<T>();
                    }
                    let m = s * inv;
                    let mut q = T::zero();
                    for b in 0..n {
                        for &v in &x[(b * c + ch) * inner..][..inner] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q * inv;
                }
                (mean, var)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batch_norm", format!("axis C: running stats must have {c} entries")));
                }
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = gamma.map(|g| self.value(g).data());
        let bd = beta.map(|b| self.value(b).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                let g = gd.map_or(T::one(), |g| g[ch]);
                let bb = bd.map_or(T::zero(), |v| v[ch]);
                for i in off..off + inner {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g * h + bb;
                }
            }
        }
        if let BnMode::Train { running: Some((rm, rv)), momentum } = mode {
            if rm.len() != c || rv.len() != c {
                return Err(Error::dim("batch_norm", format!("axis C: running stats must have {c} entries")));
            }
            let keep = T::one() - momentum;
            for ch in 0..c {
                rm[ch] = momentum * rm[ch] + keep * mean[ch];
                rv[ch] = momentum * rv[ch] + keep * var[ch];
            }
        }
        let rg = self.any_grad(&[Some(input), gamma, beta]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats }, rg))
    }

    /// Concatenation along axis 1.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(Error::dim("concat_channels", format!("inputs must be [N,C,...], got {base:?}")));
        }
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::dim("concat_channels", format!("non-channel axes differ: {base:?} vs {s:?}")));
            }
            channels += s[1];
        }
        let inner: usize = base[2..].iter().product();
        let n = base[0];
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec() }, rg))
    }

    /// Elementwise product with same-rank broadcasting over unit axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("elementwise_mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); shape.iter().product()];
        broadcast_for_each(&shape, self.shape(a), self.shape(b), |o, i, j| out[o] = av[i] * bv[j]);
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    /// Elementwise sum with same-rank broadcasting over unit axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("elementwise_add", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); shape.iter().product()];
        broadcast_for_each(&shape, self.shape(a), self.shape(b), |o, i, j| out[o] = av[i] + bv[j]);
        let rg = self.any_grad(&[Some(a), Some(b)]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[Some(input)]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[Some(input)]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Scalar objective of `input` whose value and gradient were computed
    /// outside the tape (the training losses). `grad` must match `input`.
    pub fn objective(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(Error::dim(
                "objective",
                format!("gradient {:?} does not match input {:?}", grad.shape(), self.shape(input)),
            ));
        }
        let rg = self.any_grad(&[Some(input)]);
        Ok(self.push(Tensor::scalar(value), Op::Objective { input, grad: grad.into_data() }, rg))
    }

    /// Populates the grad buffers of every reachable leaf with `∂loss/∂leaf`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            let nodes = &self.nodes;
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => unreachable!("handled above"),
                Op::Conv2d { input, weight, bias, geom } => {
                    let x = nodes[input.0].value.data();
                    let w = nodes[weight.0].value.data();
                    let (dx, dw, db) = three_slots(&mut adj, nodes, Some(*input), Some(*weight), *bias);
                    kernels::conv2d_backward(geom, x, w, &g, dx, dw, db);
                }
                Op::Depthwise { input, weight, geom } => {
                    let x = nodes[input.0].value.data();
                    let w = nodes[weight.0].value.data();
                    let (dx, dw, _) = three_slots(&mut adj, nodes, Some(*input), Some(*weight), None);
                    kernels::depthwise_backward(geom, x, w, &g, dx, dw);
                }
                Op::Linear { input, weight, bias } => {
                    let x = nodes[input.0].value.data();
                    let w = nodes[weight.0].value.data();
                    let [n, fin] = [nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]];
                    let fout = nodes[weight.0].value.shape()[0];
                    let (dx, dw, db) = three_slots(&mut adj, nodes, Some(*input), Some(*weight), *bias);
                    if let Some(dx) = dx {
                        kernels::matmul(n, fout, fin, &g, false, w, false, dx, T::one());
                    }
                    if let Some(dw) = dw {
                        kernels::matmul(fout, n, fin, &g, true, x, false, dw, T::one());
                    }
                    if let Some(db) = db {
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
                Op::GlobalAvgPool { input } => {
                    let s = nodes[input.0].value.shape();
                    let plane = s[2] * s[3];
                    let inv = T::one() / T::from_f64(plane as f64);
                    if let Some(dx) = slot(&mut adj, nodes, *input) {
                        for (chunk, &gv) in dx.chunks_mut(plane).zip(&g) {
                            chunk.iter_mut().for_each(|d| *d += gv * inv);
                        }
                    }
                }
                Op::Sigmoid { input } => {
                    let y = node.value.data();
                    if let Some(dx) = slot(&mut adj, nodes, *input) {
                        for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(&g) {
                            *d += gv * yv * (T::one() - yv);
                        }
                    }
                }
                Op::Relu { input } => {
                    let x = nodes[input.0].value.data();
                    if let Some(dx) = slot(&mut adj, nodes, *input) {
                        for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(&g) {
                            if xv > T::zero() {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                    let shape = nodes[input.0].value.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let inner: usize = shape[2..].iter().product();
                    let gamma_v = gamma.map(|v| nodes[v.0].value.data().to_vec());
                    let mut sum_dy = vec![T::zero(); c];
                    let mut sum_dy_xhat = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            for k in off..off + inner {
                                sum_dy[ch] += g[k];
                                sum_dy_xhat[ch] += g[k] * xhat[k];
                            }
                        }
                    }
                    if let Some(dg) = gamma.and_then(|v| slot(&mut adj, nodes, v)) {
                        dg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &v)| *d += v);
                    }
                    if let Some(db) = beta.and_then(|v| slot(&mut adj, nodes, v)) {
                        db.iter_mut().zip(&sum_dy).for_each(|(d, &v)| *d += v);
                    }
                    if let Some(dx) = slot(&mut adj, nodes, *input) {
                        let m = T::from_f64((n * inner) as f64);
                        for b in 0..n {
                            for ch in 0..c {
                                let gm = gamma_v.as_ref().map_or(T::one(), |gv| gv[ch]);
                                let scale = gm * inv_std[ch];
                                let off = (b * c + ch) * inner;
                                for k in off..off + inner {
                                    dx[k] += if *batch_stats {
                                        scale / m * (m * g[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch])
                                    } else {
                                        scale * g[k]
                                    };
                                }
                            }
                        }
                    }
                }
                Op::Concat { inputs } => {
                    let shape = node.value.shape();
                    let inner: usize = shape[2..].iter().product();
                    let total = shape[1] * inner;
                    let n = shape[0];
                    let mut offset = 0;
                    for &v in inputs {
                        let block = nodes[v.0].value.shape()[1] * inner;
                        if let Some(dx) = slot(&mut adj, nodes, v) {
                            for b in 0..n {
                                let src = &g[b * total + offset..][..block];
                                dx[b * block..(b + 1) * block].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                            }
                        }
                        offset += block;
                    }
                }
                Op::Mul { a, b } => {
                    let out_shape = node.value.shape();
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(da) = slot(&mut adj, nodes, *a) {
                        broadcast_for_each(out_shape, sa, sb, |o, i, j| da[i] += g[o] * bv[j]);
                    }
                    if let Some(db) = slot(&mut adj, nodes, *b) {
                        broadcast_for_each(out_shape, sa, sb, |o, i, j| db[j] += g[o] * av[i]);
                    }
                }
                Op::Add { a, b } => {
                    let out_shape = node.value.shape();
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    if let Some(da) = slot(&mut adj, nodes, *a) {
                        broadcast_for_each(out_shape, sa, sb, |o, i, _| da[i] += g[o]);
                    }
                    if let Some(db) = slot(&mut adj, nodes, *b) {
                        broadcast_for_each(out_shape, sa, sb, |o, _, j| db[j] += g[o]);
                    }
                }
                Op::Sum { input } => {
                    if let Some(dx) = slot(&mut adj, nodes, *input) {
                        dx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Reshape { input } => {
                    if let Some(dx) = slot(&mut adj, nodes, *input) {
                        dx.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                    }
                }
                Op::Objective { input, grad } => {
                    if let Some(dx) = slot(&mut adj, nodes, *input) {
                        dx.iter_mut().zip(grad).for_each(|(d, &v)| *d += g[0] * v);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adjoint buffer for `v`, allocated on first use; `None` if `v` needs no gradient.
fn slot<'a, T: Float>(adj: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let numel = nodes[v.0].value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
}

type Slots<'a, T> = (Option<&'a mut [T]>, Option<&'a mut [T]>, Option<&'a mut [T]>);

/// Disjoint adjoint buffers for up to three distinct parents.
fn three_slots<'a, T: Float>(
    adj: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    a: Option<Var>,
    b: Option<Var>,
    c: Option<Var>,
) -> Slots<'a, T> {
    let ids = [a, b, c];
    for v in ids.iter().flatten() {
        if nodes[v.0].requires_grad {
            let numel = nodes[v.0].value.numel();
            adj[v.0].get_or_insert_with(|| vec![T::zero(); numel]);
        }
    }
    let mut out: [Option<&'a mut [T]>; 3] = [None, None, None];
    let mut rest: &'a mut [Option<Vec<T>>] = adj;
    let mut base = 0;
    let mut order: Vec<(usize, usize)> =
        ids.iter().enumerate().filter_map(|(k, v)| v.filter(|v| nodes[v.0].requires_grad).map(|v| (v.0, k))).collect();
    order.sort_unstable();
    order.dedup_by_key(|(id, _)| *id);
    for (id, k) in order {
        let (_, tail) = std::mem::take(&mut rest).split_at_mut(id - base);
        let (head, tail) = tail.split_first_mut().expect("index in range");
        out[k] = head.as_deref_mut();
        rest = tail;
        base = id + 1;
    }
    let [x, y, z] = out;
    (x, y, z)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, format!("rank mismatch: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::dim(op, format!("axis {axis}: {x} vs {y} ({a:?} vs {b:?})"))),
        })
        .collect()
}

fn contiguous_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn broadcast_for_each(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let sa = contiguous_strides(a, out);
    let sb = contiguous_strides(b, out);
    let rank = out.len();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    loop {
        for k in 0..last {
            f(o + k, ia + k * la, ib + k * lb);
        }
        o += last;
        // odometer over the leading axes
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 3]));
        let w = g.constant(Tensor::ones([1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), [1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), [9.0]);
    }

    #[test]
    fn identity_pointwise_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.37 - 2.0).collect();
        let x = g.constant(t(&[1, 1, 4, 5], &data));
        let w = g.constant(Tensor::ones([1, 1, 1, 1]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 3, 5, 5]));
        let w = g.constant(Tensor::zeros([2, 4, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("axis C"), "{err}");
        let w = g.constant(Tensor::zeros([2, 3, 7, 7]));
        let err = g.conv2d(x, w, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("axis H"), "{err}");
    }

    #[test]
    fn depthwise_rejects_wrong_channel_count() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 3, 5, 5]));
        let w = g.constant(Tensor::zeros([2, 1, 3, 3]));
        assert!(matches!(g.depthwise_conv2d(x, w, 1, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([3]));
        let y = g.sigmoid(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
        let x = g.constant(t(&[2], &[-1000.0, 1000.0]).cast());
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), [0.0, 1.0]);
    }

    #[test]
    fn global_avg_pool_of_constant_channel() {
        let mut g = Graph::<f64>::new();
        let mut data = vec![2.5; 16];
        data.extend(vec![-1.0; 16]);
        let x = g.constant(t(&[1, 2, 4, 4], &data));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), [2.5, -1.0]);
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64).sin() * 3.0).collect();
        let x = g.constant(t(&[2, 3, 2, 2], &data));
        let gamma = g.constant(Tensor::ones([3]));
        let beta = g.constant(Tensor::zeros([3]));
        let (mean, var) = (vec![0.0; 3], vec![1.0; 3]);
        let eps = 1e-5;
        let y = g.batch_norm(x, Some(gamma), Some(beta), BnMode::Eval { mean: &mean, var: &var }, eps).unwrap();
        let scale = 1.0 / (1.0 + eps).sqrt();
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let y = g
            .batch_norm(x, None, None, BnMode::Train { running: Some((&mut rm, &mut rv)), momentum: 0.9 }, 0.0)
            .unwrap();
        assert!((rm[0] - 0.25).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.1 * 1.25)).abs() < 1e-12);
        let out = g.value(y).data();
        assert!(out.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut g = Graph::<f64>::new();
        let x = g.parameter(t(&[2, 2], &[1.0, -2.0, 3.5, 0.25]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), [1.0; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.parameter(t(&[2, 2], &[1.0, -2.0, 3.5, 0.25]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), [2.0, -4.0, 7.0, 0.5]);
        // a second pass accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), [4.0, -8.0, 14.0, 1.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.parameter(Tensor::ones([3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_mul_and_add() {
        let mut g = Graph::<f64>::new();
        let a = g.parameter(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.parameter(t(&[2, 1], &[10.0, 100.0]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), [10.0, 20.0, 30.0, 400.0, 500.0, 600.0]);
        let c = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let s = g.add(m, c).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), [6.0, 15.0]);
        assert_eq!(g.grad(a).unwrap().data(), [10.0, 10.0, 10.0, 100.0, 100.0, 100.0]);
        assert!(g.mul(a, c).is_ok());
        let bad = g.constant(Tensor::ones([3, 1]));
        assert!(g.mul(a, bad).is_err());
    }

    #[test]
    fn concat_and_its_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.parameter(Tensor::ones([2, 1, 2, 2]));
        let b = g.parameter(Tensor::full([2, 2, 2, 2], 2.0));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), [2, 3, 2, 2]);
        assert_eq!(&g.value(c).data()[..12], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
        let w = g.constant(Tensor::from_f64([2, 3, 2, 2], &(0..24).map(f64::from).collect::<Vec<_>>()).unwrap());
        let p = g.mul(c, w).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), [0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        assert_eq!(g.grad(b).unwrap().data()[..4], [4.0, 5.0, 6.0, 7.0]);
    }
}
