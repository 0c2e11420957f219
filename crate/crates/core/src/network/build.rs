//! Builders for the MDNet / AMDNet / DAMDNet family.

use std::fmt;
use std::str::FromStr;

use super::{Layer, NetworkSpec};
use crate::error::{Error, Result};
use crate::morphable::NUM_PARAMS;

pub const SE_REDUCTION: usize = 16;
pub const SGE_GROUPS: usize = 8;
const STEM_CHANNELS: usize = 32;
const EXPANSION: usize = 2;

/// Units, transition growth and first-unit stride of one dense block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseBlockConfig {
    pub units: usize,
    pub growth: usize,
    pub stride: usize,
}

const fn block(units: usize, growth: usize, stride: usize) -> DenseBlockConfig {
    DenseBlockConfig { units, growth, stride }
}

/// Full-width schedule of the seven dense blocks. Reconstructed so that the
/// full network lands near 2.7M parameters and 0.125 GMACs at 120×120.
pub const DAMD_SCHEDULE: [DenseBlockConfig; 7] = [
    block(1, 16, 2),
    block(1, 16, 1),
    block(3, 16, 2),
    block(1, 32, 1),
    block(1, 48, 2),
    block(1, 64, 1),
    block(4, 64, 2),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Depthwise separable convolutions in dense blocks.
    Md,
    /// MDNet plus a squeeze-excite module after every dense block.
    Amd,
    /// AMDNet plus spatial group enhancement in every mobile block.
    Damd,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Md, Variant::Amd, Variant::Damd];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Md => "MDNet",
            Variant::Amd => "AMDNet",
            Variant::Damd => "DAMDNet",
        }
    }

    pub fn has_se(self) -> bool {
        self != Variant::Md
    }

    pub fn has_sge(self) -> bool {
        self == Variant::Damd
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mdnet" | "md" => Ok(Variant::Md),
            "amdnet" | "amd" => Ok(Variant::Amd),
            "damdnet" | "damd" => Ok(Variant::Damd),
            _ => Err(Error::Config(format!("unknown network variant `{s}` (expected mdnet, amdnet or damdnet)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    /// Multiplier on every channel count.
    pub width: f64,
    /// Square input side in pixels.
    pub input_size: usize,
    /// Concatenate each transition output onto the running map. Turning
    /// this off is an ablation: each unit then feeds only its transition
    /// output forward.
    pub dense_concat: bool,
}

impl BuildOptions {
    pub fn full() -> Self {
        Self { width: 1.0, input_size: 120, dense_concat: true }
    }

    /// Desk-scale configuration used by the gradient and training checks.
    pub fn toy() -> Self {
        Self { width: 0.125, input_size: 32, dense_concat: true }
    }

    pub fn with_input(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }
}

/// `c·width` rounded to a multiple of 8, at least 8, so SGE groups always
/// divide the channel count.
pub fn scale_channels(channels: usize, width: f64) -> usize {
    let scaled = ((channels as f64 * width / 8.0).round() as usize) * 8;
    scaled.max(8)
}

/// 1×1 expand, 3×3 depthwise (stride `stride`), 1×1 project, each followed
/// by batch norm (ReLU after the first two), then optional SGE.
pub fn mobile_block_layers(
    prefix: &str,
    cin: usize,
    cout: usize,
    expansion: usize,
    stride: usize,
    sge_groups: Option<usize>,
) -> Vec<Layer> {
    let ce = cin * expansion;
    let mut v = vec![
        Layer::conv(format!("{prefix}.expand"), cin, ce, 1, 1),
        Layer::bn(format!("{prefix}.expand_bn"), ce),
        Layer::Relu,
        Layer::depthwise(format!("{prefix}.dw"), ce, 3, stride),
        Layer::bn(format!("{prefix}.dw_bn"), ce),
        Layer::Relu,
        Layer::conv(format!("{prefix}.project"), ce, cout, 1, 1),
        Layer::bn(format!("{prefix}.project_bn"), cout),
    ];
    if let Some(groups) = sge_groups {
        v.push(Layer::SpatialGroupEnhance { name: format!("{prefix}.sge"), channels: cout, groups });
    }
    v
}

/// Dense block layers and the resulting channel count. Each unit is a
/// mobile block plus a 1×1 transition (conv, BN, ReLU) whose output is
/// concatenated to the running map. When the block strides, the running
/// map is downsampled by a 3×3 depthwise conv so both branches agree.
pub fn dense_block_layers(
    prefix: &str,
    cin: usize,
    units: usize,
    growth: usize,
    stride: usize,
    sge_groups: Option<usize>,
    concat: bool,
) -> (Vec<Layer>, usize) {
    let mut layers = Vec::new();
    let mut c = cin;
    for j in 0..units {
        let s = if j == 0 { stride } else { 1 };
        let unit = format!("{prefix}.unit{}", j + 1);
        let mut body = mobile_block_layers(&unit, c, c, EXPANSION, s, sge_groups);
        body.extend([
            Layer::conv(format!("{unit}.transition"), c, growth, 1, 1),
            Layer::bn(format!("{unit}.transition_bn"), growth),
            Layer::Relu,
        ]);
        if concat {
            let skip = if s == 1 {
                Vec::new()
            } else {
                vec![Layer::depthwise(format!("{prefix}.down"), c, 3, s), Layer::bn(format!("{prefix}.down_bn"), c)]
            };
            layers.push(Layer::Concat { branches: vec![skip, body] });
            c += growth;
        } else {
            layers.extend(body);
            c = growth;
        }
    }
    (layers, c)
}

/// Conv1 (k3 s2) → seven dense blocks (each optionally followed by SE) →
/// global average pool → linear to 62.
pub fn build_network(variant: Variant, opts: &BuildOptions) -> Result<NetworkSpec> {
    if !(opts.width > 0.0 && opts.width.is_finite()) {
        return Err(Error::Config(format!("width multiplier must be positive, got {}", opts.width)));
    }
    let stem = scale_channels(STEM_CHANNELS, opts.width);
    let mut layers = vec![Layer::conv("conv1", 3, stem, 3, 2), Layer::bn("conv1_bn", stem), Layer::Relu];
    let mut c = stem;
    let sge = variant.has_sge().then_some(SGE_GROUPS);
    for (i, cfg) in DAMD_SCHEDULE.iter().enumerate() {
        let prefix = format!("layer{}", i + 1);
        let growth = scale_channels(cfg.growth, opts.width);
        let (block, out) = dense_block_layers(&prefix, c, cfg.units, growth, cfg.stride, sge, opts.dense_concat);
        layers.extend(block);
        c = out;
        if variant.has_se() {
            layers.push(Layer::SqueezeExcite { name: format!("{prefix}.se"), channels: c, reduction: SE_REDUCTION });
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear { name: "fc".into(), in_features: c, out_features: NUM_PARAMS, bias: true });
    let spec = NetworkSpec {
        name: variant.name().into(),
        input: [3, opts.input_size, opts.input_size],
        output_dim: NUM_PARAMS,
        width: opts.width,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn build_variant(variant: Variant, opts: &BuildOptions) -> Result<NetworkSpec> {
    build_network(variant, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::walk;

    fn trainable(spec: &NetworkSpec) -> usize {
        spec.tensors().unwrap().iter().filter(|t| t.2).map(|t| t.1.iter().product::<usize>()).sum()
    }

    #[test]
    fn stem_is_three_by_three_stride_two() {
        let spec = build_network(Variant::Damd, &BuildOptions::full()).unwrap();
        assert!(matches!(&spec.layers[0], Layer::Conv2d { kernel: 3, stride: 2, out_channels: 32, .. }));
    }

    #[test]
    fn variants_nest() {
        for opts in [BuildOptions::full(), BuildOptions::toy()] {
            let [md, amd, damd] = Variant::ALL.map(|v| trainable(&build_network(v, &opts).unwrap()));
            assert!(amd > md);
            let sites: usize = DAMD_SCHEDULE.iter().map(|b| b.units).sum();
            assert_eq!(damd - amd, 2 * SGE_GROUPS * sites);
        }
    }

    #[test]
    fn dense_block_bookkeeping() {
        let (layers, c) = dense_block_layers("b", 16, 3, 8, 2, Some(8), true);
        assert_eq!(c, 16 + 3 * 8);
        assert_eq!(walk(&layers, [16, 10, 10], &mut |_, _, _| {}).unwrap(), [40, 5, 5]);
        let (layers, c) = dense_block_layers("b", 16, 3, 8, 2, Some(8), false);
        assert_eq!(c, 8);
        assert_eq!(walk(&layers, [16, 10, 10], &mut |_, _, _| {}).unwrap(), [8, 5, 5]);
    }

    #[test]
    fn unknown_variant_is_an_error() {
        assert!("resnet".parse::<Variant>().is_err());
        assert_eq!("DAMDNet".parse::<Variant>().unwrap(), Variant::Damd);
    }

    #[test]
    fn toy_widths_are_multiples_of_eight() {
        assert_eq!(scale_channels(32, 0.125), 8);
        assert_eq!(scale_channels(64, 0.125), 8);
        assert_eq!(scale_channels(48, 1.0), 48);
        assert_eq!(scale_channels(100, 0.5), 48);
    }
}
