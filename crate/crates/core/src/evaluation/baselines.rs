//! Layer graphs of the comparison backbones with a 62-way regression
//! head. They are for complexity accounting only; the executor does not
//! run pooling layers.

use crate::error::Result;
use crate::morphable::NUM_PARAMS;
use crate::network::{Layer, NetworkSpec};

fn finish(name: &str, input_size: usize, mut layers: Vec<Layer>, c: usize) -> Result<NetworkSpec> {
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear { name: "fc".into(), in_features: c, out_features: NUM_PARAMS, bias: true });
    let spec = NetworkSpec {
        name: name.into(),
        input: [3, input_size, input_size],
        output_dim: NUM_PARAMS,
        width: 1.0,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

fn conv_bn(name: &str, cin: usize, cout: usize, k: usize, s: usize, groups: usize, relu: bool) -> Vec<Layer> {
    let mut v = vec![
        Layer::Conv2d {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            padding: k / 2,
            groups,
            bias: false,
        },
        Layer::bn(format!("{name}_bn"), cout),
    ];
    if relu {
        v.push(Layer::Relu);
    }
    v
}

fn imagenet_stem() -> Vec<Layer> {
    let mut v = conv_bn("conv1", 3, 64, 7, 2, 1, true);
    v.push(Layer::MaxPool { kernel: 3, stride: 2, padding: 1 });
    v
}

/// ResNeXt-50 with cardinality 32 and base width 4, stride on the grouped
/// 3×3 convolution.
pub fn resnext50_32x4d(input_size: usize) -> Result<NetworkSpec> {
    let mut layers = imagenet_stem();
    let mut c = 64;
    for (stage, &blocks) in [3usize, 4, 6, 3].iter().enumerate() {
        let width = 128 << stage;
        let out = 256 << stage;
        for b in 0..blocks {
            let p = format!("layer{}.{b}", stage + 1);
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let mut body = conv_bn(&format!("{p}.conv1"), c, width, 1, 1, 1, true);
            body.extend(conv_bn(&format!("{p}.conv2"), width, width, 3, stride, 32, true));
            body.extend(conv_bn(&format!("{p}.conv3"), width, out, 1, 1, 1, false));
            let shortcut =
                if b == 0 { conv_bn(&format!("{p}.downsample"), c, out, 1, stride, 1, false) } else { vec![] };
            layers.push(Layer::Residual { body, shortcut });
            layers.push(Layer::Relu);
            c = out;
        }
    }
    finish("ResNeXt50-32x4d", input_size, layers, c)
}

/// DenseNet-121: growth 32, bottleneck 4×, compression 0.5.
pub fn densenet121(input_size: usize) -> Result<NetworkSpec> {
    let mut layers = imagenet_stem();
    let mut c = 64;
    let blocks = [6usize, 12, 24, 16];
    for (i, &units) in blocks.iter().enumerate() {
        for u in 0..units {
            let p = format!("denseblock{}.layer{u}", i + 1);
            let branch = vec![
                Layer::bn(format!("{p}.norm1"), c),
                Layer::Relu,
                Layer::conv(format!("{p}.conv1"), c, 128, 1, 1),
                Layer::bn(format!("{p}.norm2"), 128),
                Layer::Relu,
                Layer::conv(format!("{p}.conv2"), 128, 32, 3, 1),
            ];
            layers.push(Layer::Concat { branches: vec![vec![], branch] });
            c += 32;
        }
        if i + 1 < blocks.len() {
            let p = format!("transition{}", i + 1);
            layers.extend([
                Layer::bn(format!("{p}.norm"), c),
                Layer::Relu,
                Layer::conv(format!("{p}.conv"), c, c / 2, 1, 1),
                Layer::AvgPool { kernel: 2, stride: 2, padding: 0 },
            ]);
            c /= 2;
        }
    }
    layers.extend([Layer::bn("norm5", c), Layer::Relu]);
    finish("DenseNet121", input_size, layers, c)
}

/// MobileNetV2 at width 1.0 with the 1280-channel final convolution.
pub fn mobilenet_v2(input_size: usize) -> Result<NetworkSpec> {
    const SETTINGS: [(usize, usize, usize, usize); 7] =
        [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)];
    let mut layers = conv_bn("conv1", 3, 32, 3, 2, 1, true);
    let mut c = 32;
    let mut idx = 0;
    for &(t, out, n, s) in &SETTINGS {
        for i in 0..n {
            let p = format!("features.{idx}");
            idx += 1;
            let stride = if i == 0 { s } else { 1 };
            let hidden = c * t;
            let mut body = Vec::new();
            if t != 1 {
                body.extend(conv_bn(&format!("{p}.expand"), c, hidden, 1, 1, 1, true));
            }
            body.extend(conv_bn(&format!("{p}.dw"), hidden, hidden, 3, stride, hidden, true));
            body.extend(conv_bn(&format!("{p}.project"), hidden, out, 1, 1, 1, false));
            if stride == 1 && c == out {
                layers.push(Layer::Residual { body, shortcut: vec![] });
            } else {
                layers.extend(body);
            }
            c = out;
        }
    }
    layers.extend(conv_bn("conv_last", c, 1280, 1, 1, 1, true));
    finish("MobileNetV2", input_size, layers, 1280)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{count_flops, count_params};

    fn summary(spec: &NetworkSpec) -> (f64, f64) {
        (count_params(spec).unwrap() as f64 / 1e6, count_flops(spec).unwrap())
    }

    #[test]
    fn reference_sizes() {
        for (spec, p, f) in [
            (resnext50_32x4d(120).unwrap(), 23.107, 1.300),
            (densenet121(120).unwrap(), 7.017, 0.778),
            (mobilenet_v2(120).unwrap(), 2.303, 0.0932),
        ] {
            let (gp, gf) = summary(&spec);
            eprintln!("{}: {gp:.4}M {gf:.4}G", spec.name);
            assert!((gp - p).abs() / p < 0.005, "{} params {gp}", spec.name);
            assert!((gf - f).abs() / f < 0.01, "{} flops {gf}", spec.name);
        }
    }
}
