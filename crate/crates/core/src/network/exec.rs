//! Runs a [`NetworkSpec`] on a [`Graph`], plus parameter initialization.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{layer_tensors, walk, Layer, NetworkSpec};
use crate::error::{Error, Result};
use crate::morphable::NUM_PARAMS;
use crate::tensor::{BnMode, Float, Graph, ParamKind, ParamStore, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
/// Variance guard of the SGE similarity normalization.
pub const SGE_EPS: f64 = 1e-5;

/// Buffers holding the per-dataset target normalization: the network
/// predicts `(p − mean) / std`.
pub const TARGET_MEAN: &str = "target.mean";
pub const TARGET_STD: &str = "target.std";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Batch statistics; running statistics are updated when `update_stats`.
    Train { update_stats: bool },
    /// Running statistics.
    Eval,
}

/// Kaiming-normal conv/linear weights, zero biases, unit BN and SGE
/// scales, plus identity target normalization buffers.
pub fn init_params<T: Float>(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    walk(&spec.layers, spec.input, &mut |layer, _, _| layers.push(layer.clone()))?;
    for layer in &layers {
        for (name, shape, trainable) in layer_tensors(layer) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                vec![1.0; numel]
            } else {
                vec![0.0; numel]
            };
            let kind = if trainable { ParamKind::Trainable } else { ParamKind::Buffer };
            store.insert(name, Tensor::from_f64(shape, &data)?, kind);
        }
    }
    store.insert(TARGET_MEAN, Tensor::zeros([spec.output_dim]), ParamKind::Buffer);
    store.insert(TARGET_STD, Tensor::ones([spec.output_dim]), ParamKind::Buffer);
    Ok(store)
}

pub struct SeOutput {
    pub output: Var,
    /// Channel gates `[N, C]`.
    pub gate: Var,
}

/// `x ⊙ σ(FC2(ReLU(FC1(GAP(x)))))` with gates broadcast over space.
pub fn se_module<T: Float>(g: &mut Graph<T>, x: Var, fc1: (Var, Var), fc2: (Var, Var)) -> Result<SeOutput> {
    let [n, c, _, _] = g.value(x).dims::<4>("se_module", "input")?;
    let pooled = g.global_avg_pool(x)?;
    let flat = g.reshape(pooled, &[n, c])?;
    let hidden = g.linear(flat, fc1.0, Some(fc1.1))?;
    let hidden = g.relu(hidden);
    let logits = g.linear(hidden, fc2.0, Some(fc2.1))?;
    if g.shape(logits)[1] != c {
        return Err(Error::dim("se_module", format!("axis C: gates have {} channels, input {c}", g.shape(logits)[1])));
    }
    let gate = g.sigmoid(logits);
    let gate4 = g.reshape(gate, &[n, c, 1, 1])?;
    let output = g.mul(x, gate4)?;
    Ok(SeOutput { output, gate })
}

pub struct SgeOutput {
    pub output: Var,
    /// Spatial masks `[N, g, H, W]`.
    pub mask: Var,
    /// Standardized similarity maps before the affine, `[N, g, H, W]`.
    pub normalized: Var,
}

/// Spatial group enhancement: per group, the similarity of every position
/// to the group's pooled descriptor is standardized over space, scaled by
/// `gamma`, shifted by `beta` (each `[groups]`) and squashed into a mask.
pub fn sge_module<T: Float>(g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<SgeOutput> {
    let [n, c, h, w] = g.value(x).dims::<4>("sge_module", "input")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("sge_module: {c} channels are not divisible into {groups} groups")));
    }
    for (what, v) in [("gamma", gamma), ("beta", beta)] {
        if g.shape(v) != [groups] {
            return Err(Error::dim("sge_module", format!("{what} must be [{groups}], got {:?}", g.shape(v))));
        }
    }
    let cg = c / groups;
    let xg = g.reshape(x, &[n * groups, cg, h, w])?;
    let pooled = g.global_avg_pool(xg)?;
    let prod = g.mul(xg, pooled)?;
    let ones = g.constant(Tensor::ones([1, cg, 1, 1]));
    let sim = g.conv2d(prod, ones, None, 1, 0)?;
    let sim = g.reshape(sim, &[1, n * groups, h, w])?;
    let normalized =
        g.batch_norm(sim, None, None, BnMode::Train { running: None, momentum: T::zero() }, T::from_f64(SGE_EPS))?;
    let normalized = g.reshape(normalized, &[n, groups, h, w])?;
    let gamma4 = g.reshape(gamma, &[1, groups, 1, 1])?;
    let beta4 = g.reshape(beta, &[1, groups, 1, 1])?;
    let scaled = g.mul(normalized, gamma4)?;
    let shifted = g.add(scaled, beta4)?;
    let mask = g.sigmoid(shifted);
    let mask_g = g.reshape(mask, &[n * groups, 1, h, w])?;
    let out = g.mul(xg, mask_g)?;
    let output = g.reshape(out, &[n, c, h, w])?;
    Ok(SgeOutput { output, mask, normalized })
}

/// One forward pass of a layer list over a graph, resolving named
/// parameters from a [`ParamStore`].
///
/// Trainable tensors become graph leaves on first use (with gradients when
/// `requires_grad`); [`Forward::bind`] substitutes an existing variable for
/// a name instead, which is how gradient checks perturb a single tensor.
pub struct Forward<'a, T: Float> {
    pub graph: &'a mut Graph<T>,
    params: &'a mut ParamStore<T>,
    mode: RunMode,
    requires_grad: bool,
    bindings: IndexMap<String, Var>,
}

impl<'a, T: Float> Forward<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a mut ParamStore<T>, mode: RunMode) -> Self {
        let requires_grad = matches!(mode, RunMode::Train { .. });
        Self { graph, params, mode, requires_grad, bindings: IndexMap::new() }
    }

    pub fn requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bindings.insert(name.into(), var);
    }

    /// Names and graph variables of every trainable tensor used so far.
    pub fn bindings(&self) -> &IndexMap<String, Var> {
        &self.bindings
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = self.graph.leaf(value, self.requires_grad);
        self.bindings.insert(name.to_string(), v);
        Ok(v)
    }

    /// Accumulated gradients of all bound tensors after `backward`.
    pub fn gradients(&self) -> IndexMap<String, Tensor<T>> {
        self.bindings.iter().filter_map(|(name, &v)| self.graph.grad(v).map(|g| (name.clone(), g.clone()))).collect()
    }

    /// Runs the whole network on `[N, 3, H, W]` input, producing `[N, 62]`.
    pub fn network(&mut self, spec: &NetworkSpec, input: Var) -> Result<Var> {
        let shape = self.graph.shape(input);
        if shape.len() != 4 || shape[1..] != spec.input {
            return Err(Error::dim(
                "network_forward",
                format!(
                    "input {:?} does not match the network's [N, {}, {}, {}]",
                    shape, spec.input[0], spec.input[1], spec.input[2]
                ),
            ));
        }
        self.run(&spec.layers, input)
    }

    pub fn run(&mut self, layers: &[Layer], mut x: Var) -> Result<Var> {
        for layer in layers {
            x = self.layer(layer, x)?;
        }
        Ok(x)
    }

    fn layer(&mut self, layer: &Layer, x: Var) -> Result<Var> {
        match layer {
            Layer::Conv2d { name, in_channels, out_channels, stride, padding, groups, bias, .. } => {
                let w = self.param(&format!("{name}.weight"))?;
                let b = if *bias { Some(self.param(&format!("{name}.bias"))?) } else { None };
                if *groups == 1 {
                    self.graph.conv2d(x, w, b, *stride, *padding)
                } else if groups == in_channels && groups == out_channels {
                    let y = self.graph.depthwise_conv2d(x, w, *stride, *padding)?;
                    match b {
                        Some(b) => {
                            let b4 = self.graph.reshape(b, &[1, *out_channels, 1, 1])?;
                            self.graph.add(y, b4)
                        }
                        None => Ok(y),
                    }
                } else {
                    Err(Error::Unsupported(format!("`{name}`: grouped convolution with {groups} groups")))
                }
            }
            Layer::BatchNorm { name, .. } => {
                let gamma = self.param(&format!("{name}.gamma"))?;
                let beta = self.param(&format!("{name}.beta"))?;
                let (rm, rv) = (format!("{name}.running_mean"), format!("{name}.running_var"));
                let eps = T::from_f64(BN_EPS);
                match self.mode {
                    RunMode::Train { update_stats } => {
                        let running = if update_stats {
                            let (m, v) = self.params.get_pair_mut(&rm, &rv)?;
                            Some((m.data_mut(), v.data_mut()))
                        } else {
                            None
                        };
                        let mode = BnMode::Train { running, momentum: T::from_f64(BN_MOMENTUM) };
                        self.graph.batch_norm(x, Some(gamma), Some(beta), mode, eps)
                    }
                    RunMode::Eval => {
                        let mode =
                            BnMode::Eval { mean: self.params.get(&rm)?.data(), var: self.params.get(&rv)?.data() };
                        self.graph.batch_norm(x, Some(gamma), Some(beta), mode, eps)
                    }
                }
            }
            Layer::Relu => Ok(self.graph.relu(x)),
            Layer::MaxPool { .. } | Layer::AvgPool { .. } => {
                Err(Error::Unsupported("pooling layers are analyzer-only".into()))
            }
            Layer::GlobalAvgPool => self.graph.global_avg_pool(x),
            Layer::Linear { name, bias, .. } => {
                let shape = self.graph.shape(x).to_vec();
                let flat = if shape.len() == 2 {
                    x
                } else {
                    self.graph.reshape(x, &[shape[0], shape[1..].iter().product()])?
                };
                let w = self.param(&format!("{name}.weight"))?;
                let b = if *bias { Some(self.param(&format!("{name}.bias"))?) } else { None };
                self.graph.linear(flat, w, b)
            }
            Layer::SqueezeExcite { name, .. } => {
                let fc1 = (self.param(&format!("{name}.fc1.weight"))?, self.param(&format!("{name}.fc1.bias"))?);
                let fc2 = (self.param(&format!("{name}.fc2.weight"))?, self.param(&format!("{name}.fc2.bias"))?);
                Ok(se_module(self.graph, x, fc1, fc2)?.output)
            }
            Layer::SpatialGroupEnhance { name, groups, .. } => {
                let gamma = self.param(&format!("{name}.gamma"))?;
                let beta = self.param(&format!("{name}.beta"))?;
                Ok(sge_module(self.graph, x, gamma, beta, *groups)?.output)
            }
            Layer::Concat { branches } => {
                let outs = branches.iter().map(|b| self.run(b, x)).collect::<Result<Vec<_>>>()?;
                self.graph.concat_channels(&outs)
            }
            Layer::Residual { body, shortcut } => {
                let a = self.run(body, x)?;
                let b = self.run(shortcut, x)?;
                self.graph.add(a, b)
            }
        }
    }
}

/// Maps raw network outputs `[N, 62]` back to parameter space with the
/// stored target normalization.
pub fn denormalize<T: Float>(params: &ParamStore<T>, raw: &[T]) -> Result<Vec<f64>> {
    let mean = params.get(TARGET_MEAN)?.data();
    let std = params.get(TARGET_STD)?.data();
    if mean.len() != NUM_PARAMS || std.len() != NUM_PARAMS || !raw.len().is_multiple_of(NUM_PARAMS) {
        return Err(Error::dim("denormalize", format!("expected rows of {NUM_PARAMS} values")));
    }
    Ok(raw
        .chunks_exact(NUM_PARAMS)
        .flat_map(|row| (0..NUM_PARAMS).map(move |k| row[k].as_f64() * std[k].as_f64() + mean[k].as_f64()))
        .collect())
}
