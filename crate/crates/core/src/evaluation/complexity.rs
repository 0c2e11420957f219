//! Parameter and multiply-accumulate counts from the layer graph.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{se_bottleneck, walk, Layer, NetworkSpec};

/// Trainable parameters. Batch-norm running statistics are excluded.
pub fn count_params(spec: &NetworkSpec) -> Result<usize> {
    Ok(spec.tensors()?.iter().filter(|t| t.2).map(|t| t.1.iter().product::<usize>()).sum())
}

/// Non-trainable tensors owned by layers, i.e. running statistics.
pub fn count_buffers(spec: &NetworkSpec) -> Result<usize> {
    Ok(spec.tensors()?.iter().filter(|t| !t.2).map(|t| t.1.iter().product::<usize>()).sum())
}

/// Multiply-accumulates of one forward pass on a single image at the
/// spec's input resolution. Convolutions and fully connected layers
/// (including the excitation FCs) count; elementwise work does not.
pub fn count_macs(spec: &NetworkSpec) -> Result<u64> {
    let mut macs = 0u64;
    walk(&spec.layers, spec.input, &mut |layer, _, [_, ho, wo]| {
        macs += match layer {
            Layer::Conv2d { in_channels, out_channels, kernel, groups, .. } => {
                (kernel * kernel * (in_channels / groups) * out_channels * ho * wo) as u64
            }
            Layer::Linear { in_features, out_features, .. } => (in_features * out_features) as u64,
            Layer::SqueezeExcite { channels, reduction, .. } => {
                (2 * channels * se_bottleneck(*channels, *reduction)) as u64
            }
            _ => 0,
        };
    })?;
    Ok(macs)
}

/// MACs in billions, the unit complexity tables report as GFLOPs.
pub fn count_flops(spec: &NetworkSpec) -> Result<f64> {
    Ok(count_macs(spec)? as f64 / 1e9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub name: String,
    pub params: usize,
    pub params_m: f64,
    pub gflops: f64,
}

impl ComplexityRow {
    pub fn of(spec: &NetworkSpec) -> Result<Self> {
        let params = count_params(spec)?;
        Ok(Self { name: spec.name.clone(), params, params_m: params as f64 / 1e6, gflops: count_flops(spec)? })
    }

    pub fn table(rows: &[Self]) -> String {
        let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<width$}  {:>10}  {:>8}\n", "Network", "Params(M)", "GFLOPs");
        for r in rows {
            s += &format!("{:<width$}  {:>10.3}  {:>8.4}\n", r.name, r.params_m, r.gflops);
        }
        s
    }
}
