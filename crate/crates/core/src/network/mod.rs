//! Layer-graph description of the regressors, shared by the executor and
//! the complexity analyzer.

mod build;
mod exec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_out_dim;

pub use build::{
    build_network, build_variant, dense_block_layers, mobile_block_layers, scale_channels, BuildOptions,
    DenseBlockConfig, Variant, DAMD_SCHEDULE, SE_REDUCTION, SGE_GROUPS,
};
pub use exec::{
    denormalize, init_params, se_module, sge_module, Forward, RunMode, SeOutput, SgeOutput, BN_EPS, BN_MOMENTUM,
    SGE_EPS, TARGET_MEAN, TARGET_STD,
};

/// One node of the layer graph. Parameterized layers own a unique `name`
/// that prefixes their tensors in the weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu,
    /// Analyzer-only.
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Analyzer-only.
    AvgPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    /// Flattens a `[N,C,1,1]` input first.
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    SqueezeExcite {
        name: String,
        channels: usize,
        reduction: usize,
    },
    SpatialGroupEnhance {
        name: String,
        channels: usize,
        groups: usize,
    },
    /// Runs every branch on the same input and concatenates the results
    /// along channels; an empty branch passes its input through.
    Concat {
        branches: Vec<Vec<Layer>>,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

impl Layer {
    pub fn conv(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Layer::Conv2d {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize, stride: usize) -> Self {
        Layer::Conv2d {
            name: name.into(),
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups: channels,
            bias: false,
        }
    }

    pub fn bn(name: impl Into<String>, channels: usize) -> Self {
        Layer::BatchNorm { name: name.into(), channels }
    }

    /// Feature-map shape `[C,H,W]` after this layer.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = input;
        walk(std::slice::from_ref(self), input, &mut |_, _, o| out = o)?;
        Ok(out)
    }
}

/// Primitive layers visited by [`walk`] with their input and output
/// `[C,H,W]` shapes. Composite layers are expanded, never reported.
pub type Visitor<'a> = dyn FnMut(&Layer, [usize; 3], [usize; 3]) + 'a;

/// Infers shapes through `layers`, validating channel compatibility and
/// reporting each primitive layer to `visit`. Returns the output shape.
pub fn walk(layers: &[Layer], input: [usize; 3], visit: &mut Visitor<'_>) -> Result<[usize; 3]> {
    let mut shape = input;
    for layer in layers {
        shape = walk_one(layer, shape, visit)?;
    }
    Ok(shape)
}

fn walk_one(layer: &Layer, [c, h, w]: [usize; 3], visit: &mut Visitor<'_>) -> Result<[usize; 3]> {
    let mismatch = |what: &str, expected: usize| {
        Err(Error::Config(format!("layer {}: {what} expects {expected} channels, input has {c}", describe(layer))))
    };
    let spatial = |k: usize, s: usize, p: usize| -> Result<[usize; 2]> {
        match (conv_out_dim(h, k, s, p), conv_out_dim(w, k, s, p)) {
            (Some(ho), Some(wo)) if s > 0 => Ok([ho, wo]),
            _ => Err(Error::Config(format!(
                "layer {}: kernel {k} stride {s} padding {p} does not fit a {h}×{w} map",
                describe(layer)
            ))),
        }
    };
    let out = match layer {
        Layer::Conv2d { in_channels, out_channels, kernel, stride, padding, groups, .. } => {
            if *in_channels != c {
                return mismatch("conv", *in_channels);
            }
            if *groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                return Err(Error::Config(format!(
                    "layer {}: {groups} groups do not divide {in_channels}→{out_channels}",
                    describe(layer)
                )));
            }
            let [ho, wo] = spatial(*kernel, *stride, *padding)?;
            [*out_channels, ho, wo]
        }
        Layer::BatchNorm { channels, .. } => {
            if *channels != c {
                return mismatch("batch norm", *channels);
            }
            [c, h, w]
        }
        Layer::Relu => [c, h, w],
        Layer::MaxPool { kernel, stride, padding } | Layer::AvgPool { kernel, stride, padding } => {
            let [ho, wo] = spatial(*kernel, *stride, *padding)?;
            [c, ho, wo]
        }
        Layer::GlobalAvgPool => [c, 1, 1],
        Layer::Linear { in_features, out_features, .. } => {
            if c * h * w != *in_features {
                return Err(Error::Config(format!(
                    "layer {}: expects {in_features} features, input has {c}×{h}×{w}",
                    describe(layer)
                )));
            }
            [*out_features, 1, 1]
        }
        Layer::SqueezeExcite { channels, reduction, .. } => {
            if *channels != c {
                return mismatch("squeeze-excite", *channels);
            }
            if *reduction == 0 {
                return Err(Error::Config(format!("layer {}: reduction must be positive", describe(layer))));
            }
            [c, h, w]
        }
        Layer::SpatialGroupEnhance { channels, groups, .. } => {
            if *channels != c {
                return mismatch("spatial group enhance", *channels);
            }
            if *groups == 0 || c % groups != 0 {
                return Err(Error::Config(format!(
                    "layer {}: {c} channels are not divisible into {groups} groups",
                    describe(layer)
                )));
            }
            [c, h, w]
        }
        Layer::Concat { branches } => {
            if branches.is_empty() {
                return Err(Error::Config("concat without branches".into()));
            }
            let mut total = 0;
            let mut hw = None;
            for branch in branches {
                let [bc, bh, bw] = walk(branch, [c, h, w], visit)?;
                if hw.is_some_and(|s| s != [bh, bw]) {
                    return Err(Error::Config(format!(
                        "concat branches disagree on spatial size: {:?} vs {:?}",
                        hw.unwrap(),
                        [bh, bw]
                    )));
                }
                hw = Some([bh, bw]);
                total += bc;
            }
            let [ho, wo] = hw.expect("nonempty");
            return Ok([total, ho, wo]);
        }
        Layer::Residual { body, shortcut } => {
            let a = walk(body, [c, h, w], visit)?;
            let b = walk(shortcut, [c, h, w], visit)?;
            if a != b {
                return Err(Error::Config(format!("residual body {a:?} and shortcut {b:?} differ")));
            }
            return Ok(a);
        }
    };
    visit(layer, [c, h, w], out);
    Ok(out)
}

fn describe(layer: &Layer) -> String {
    match layer {
        Layer::Conv2d { name, .. }
        | Layer::BatchNorm { name, .. }
        | Layer::Linear { name, .. }
        | Layer::SqueezeExcite { name, .. }
        | Layer::SpatialGroupEnhance { name, .. } => format!("`{name}`"),
        Layer::Relu => "relu".into(),
        Layer::MaxPool { .. } => "max_pool".into(),
        Layer::AvgPool { .. } => "avg_pool".into(),
        Layer::GlobalAvgPool => "global_avg_pool".into(),
        Layer::Concat { .. } => "concat".into(),
        Layer::Residual { .. } => "residual".into(),
    }
}

/// Tensor shapes a layer owns, as `(suffix, shape, trainable)`.
pub(crate) fn layer_tensors(layer: &Layer) -> Vec<(String, Vec<usize>, bool)> {
    match layer {
        Layer::Conv2d { name, in_channels, out_channels, kernel, groups, bias, .. } => {
            let mut v =
                vec![(format!("{name}.weight"), vec![*out_channels, in_channels / groups, *kernel, *kernel], true)];
            if *bias {
                v.push((format!("{name}.bias"), vec![*out_channels], true));
            }
            v
        }
        Layer::BatchNorm { name, channels } => vec![
            (format!("{name}.gamma"), vec![*channels], true),
            (format!("{name}.beta"), vec![*channels], true),
            (format!("{name}.running_mean"), vec![*channels], false),
            (format!("{name}.running_var"), vec![*channels], false),
        ],
        Layer::Linear { name, in_features, out_features, bias } => {
            let mut v = vec![(format!("{name}.weight"), vec![*out_features, *in_features], true)];
            if *bias {
                v.push((format!("{name}.bias"), vec![*out_features], true));
            }
            v
        }
        Layer::SqueezeExcite { name, channels, reduction } => {
            let b = se_bottleneck(*channels, *reduction);
            vec![
                (format!("{name}.fc1.weight"), vec![b, *channels], true),
                (format!("{name}.fc1.bias"), vec![b], true),
                (format!("{name}.fc2.weight"), vec![*channels, b], true),
                (format!("{name}.fc2.bias"), vec![*channels], true),
            ]
        }
        Layer::SpatialGroupEnhance { name, groups, .. } => {
            vec![(format!("{name}.gamma"), vec![*groups], true), (format!("{name}.beta"), vec![*groups], true)]
        }
        _ => Vec::new(),
    }
}

/// `max(1, C / r)`.
pub fn se_bottleneck(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(1)
}

/// A complete regressor: layers, input `[C,H,W]` and output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input: [usize; 3],
    pub output_dim: usize,
    pub width: f64,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// Checks channel compatibility end to end and that the network emits
    /// `output_dim` values.
    pub fn validate(&self) -> Result<()> {
        let out = walk(&self.layers, self.input, &mut |_, _, _| {})?;
        if out != [self.output_dim, 1, 1] {
            return Err(Error::Config(format!(
                "network `{}` produces {out:?}, expected {} outputs",
                self.name, self.output_dim
            )));
        }
        Ok(())
    }

    /// Every tensor the network owns in a stable order.
    pub fn tensors(&self) -> Result<Vec<(String, Vec<usize>, bool)>> {
        let mut out = Vec::new();
        walk(&self.layers, self.input, &mut |layer, _, _| out.extend(layer_tensors(layer)))?;
        let mut seen = std::collections::HashSet::new();
        if let Some((dup, ..)) = out.iter().find(|(n, ..)| !seen.insert(n.clone())) {
            return Err(Error::Config(format!("tensor name `{dup}` is used twice")));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("network spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}
