//! Landmark accuracy metrics and network complexity accounting.

mod baselines;
mod complexity;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use baselines::{densenet121, mobilenet_v2, resnext50_32x4d};
pub use complexity::{count_buffers, count_flops, count_macs, count_params, ComplexityRow};

/// Ground truth, visibility and prediction for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub name: String,
    pub gt: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
    pub pred: Vec<[f64; 2]>,
    /// `sqrt(w·h)` of the face box.
    pub d: f64,
    pub yaw_deg: f64,
}

impl EvalSample {
    pub fn normalizer(bbox: [f64; 4]) -> f64 {
        (bbox[2] * bbox[3]).sqrt()
    }

    /// Mean visible-landmark error over `d`, as a fraction.
    pub fn error(&self) -> Result<f64> {
        if self.gt.len() != self.pred.len() || self.gt.len() != self.visibility.len() {
            return Err(Error::dim(
                "nme",
                format!(
                    "sample `{}`: {} ground-truth points, {} predictions, {} visibility flags",
                    self.name,
                    self.gt.len(),
                    self.pred.len(),
                    self.visibility.len()
                ),
            ));
        }
        if !(self.d > 0.0) {
            return Err(Error::Config(format!("sample `{}`: normalizer must be positive, got {}", self.name, self.d)));
        }
        let visible = self.visibility.iter().filter(|&&v| v).count();
        if visible == 0 {
            return Err(Error::Config(format!("sample `{}` has no visible landmarks", self.name)));
        }
        let sum: f64 = self
            .gt
            .iter()
            .zip(&self.pred)
            .zip(&self.visibility)
            .filter(|(_, &v)| v)
            .map(|((g, p), _)| (g[0] - p[0]).hypot(g[1] - p[1]))
            .sum();
        Ok(sum / (self.d * visible as f64))
    }
}

/// Per-sample NME in percent.
pub fn per_sample_nme(samples: &[EvalSample]) -> Result<Vec<f64>> {
    samples.iter().map(|s| Ok(100.0 * s.error()?)).collect()
}

/// Mean normalized error of visible landmarks in percent.
pub fn nme(samples: &[EvalSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("nme of an empty sample set".into()));
    }
    let errors = per_sample_nme(samples)?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Fraction of samples whose NME (percent) is at most each threshold.
pub fn ced_curve(samples: &[EvalSample], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::Config("CED curve of an empty sample set".into()));
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Config("CED thresholds must be sorted ascending".into()));
    }
    let mut errors = per_sample_nme(samples)?;
    errors.sort_by(f64::total_cmp);
    let n = errors.len() as f64;
    Ok(thresholds.iter().map(|&t| (t, errors.partition_point(|&e| e <= t) as f64 / n)).collect())
}

pub const YAW_BINS: [(f64, f64); 3] = [(0.0, 30.0), (30.0, 60.0), (60.0, 90.0)];
/// Slack on the ±90° yaw range for rounding in annotations.
pub const YAW_TOLERANCE: f64 = 1e-6;

/// NME per absolute-yaw bin with the mean and population std of the bins
/// that have samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub bins: [Option<f64>; 3],
    pub counts: [usize; 3],
    pub mean: f64,
    pub std: f64,
    /// Set when some bin had no samples and was left out of mean and std.
    pub incomplete: bool,
}

impl BinReport {
    /// Report from three given bin values.
    pub fn from_bins(bins: [Option<f64>; 3], counts: [usize; 3]) -> Result<Self> {
        let present: Vec<f64> = bins.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Config("every yaw bin is empty".into()));
        }
        let n = present.len() as f64;
        let mean = present.iter().sum::<f64>() / n;
        let std = (present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self { bins, counts, mean, std, incomplete: present.len() < 3 })
    }

    /// Aligned text table with one header row.
    pub fn to_table(&self, label: &str) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let width = label.len().max(6);
        let mut s = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}  {:>7}\n",
            "Method", "[0,30]", "(30,60]", "(60,90]", "Mean", "Std"
        );
        s += &format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7.3}  {:>7.3}\n",
            label,
            cell(self.bins[0]),
            cell(self.bins[1]),
            cell(self.bins[2]),
            self.mean,
            self.std
        );
        if self.incomplete {
            s += "warning: empty yaw bins were excluded from Mean and Std\n";
        }
        s
    }
}

/// Index of the bin for `|yaw|`, boundaries going to the lower bin.
pub fn yaw_bin(yaw_deg: f64) -> Result<usize> {
    let a = yaw_deg.abs();
    if !(a <= 90.0 + YAW_TOLERANCE) {
        return Err(Error::Config(format!("yaw {yaw_deg}° is outside ±90°")));
    }
    Ok(if a <= 30.0 {
        0
    } else if a <= 60.0 {
        1
    } else {
        2
    })
}

pub fn yaw_bin_report(samples: &[EvalSample]) -> Result<BinReport> {
    let mut groups: [Vec<EvalSample>; 3] = Default::default();
    for s in samples {
        groups[yaw_bin(s.yaw_deg)?].push(s.clone());
    }
    let mut bins = [None; 3];
    let mut counts = [0; 3];
    for (k, g) in groups.iter().enumerate() {
        counts[k] = g.len();
        if !g.is_empty() {
            bins[k] = Some(nme(g)?);
        }
    }
    BinReport::from_bins(bins, counts)
}

/// `threshold,fraction` rows with a header.
pub fn ced_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("threshold,fraction\n");
    for (t, f) in curve {
        s += &format!("{t},{f}\n");
    }
    s
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_path: String,
    pub landmarks: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
}
