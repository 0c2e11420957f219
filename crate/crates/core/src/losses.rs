//! Training objectives on 62-dim parameter vectors: weighted parameter
//! distance, Wing loss on reconstructed vertices, and their weighted sum.
//! Every loss comes with an analytic gradient with respect to the
//! prediction.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::morphable::{landmark_vertices, MorphableModel, ParamVector, NUM_PARAMS, NUM_POSE};

/// Diagonal of the WPDC weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WpdcWeights(Vec<f64>);

impl WpdcWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        check_len("wpdc_weights", w.len())?;
        if let Some(k) = w.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Config(format!("WPDC weight {k} is {} (must be positive and finite)", w[k])));
        }
        Ok(Self(w))
    }

    pub fn ones() -> Self {
        Self(vec![1.0; NUM_PARAMS])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `w_k = 1/std_k`, rescaled so the largest weight is 1.
pub fn wpdc_weights_from_std(param_std: &[f64]) -> Result<WpdcWeights> {
    check_len("wpdc_weights_from_std", param_std.len())?;
    if let Some(k) = param_std.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("standard deviation {k} is {} (must be positive)", param_std[k])));
    }
    let inv: Vec<f64> = param_std.iter().map(|s| 1.0 / s).collect();
    let max = inv.iter().cloned().fold(0.0, f64::max);
    WpdcWeights::new(inv.into_iter().map(|w| w / max).collect())
}

fn check_len(op: &'static str, len: usize) -> Result<()> {
    if len != NUM_PARAMS {
        return Err(Error::dim(op, format!("expected {NUM_PARAMS} values, got {len}")));
    }
    Ok(())
}

/// `Σ_k w_k (gt_k − pred_k)²`.
pub fn wpdc(pred: &[f64], gt: &[f64], weights: &WpdcWeights) -> Result<f64> {
    Ok(wpdc_with_grad(pred, gt, weights)?.0)
}

pub fn wpdc_with_grad(pred: &[f64], gt: &[f64], weights: &WpdcWeights) -> Result<(f64, Vec<f64>)> {
    check_len("wpdc", pred.len())?;
    check_len("wpdc", gt.len())?;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .zip(&weights.0)
        .map(|((&p, &g), &w)| {
            let d = g - p;
            value += w * d * d;
            -2.0 * w * d
        })
        .collect();
    Ok((value, grad))
}

/// Wing loss shape parameters; `c` joins the two branches at `|δ| = ω`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WingConfig {
    omega: f64,
    epsilon: f64,
    c: f64,
}

impl Default for WingConfig {
    fn default() -> Self {
        Self::new(10.0, 2.0).expect("valid defaults")
    }
}

impl WingConfig {
    pub fn new(omega: f64, epsilon: f64) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite() && epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("wing needs positive ω and ε, got ω={omega}, ε={epsilon}")));
        }
        Ok(Self { omega, epsilon, c: omega - omega * (omega / epsilon).ln_1p() })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn loss(&self, delta: f64) -> f64 {
        let a = delta.abs();
        if a < self.omega {
            self.omega * (a / self.epsilon).ln_1p()
        } else {
            a - self.c
        }
    }

    /// Derivative in `δ`; 0 at `δ = 0`, the right branch's slope at the kink.
    pub fn derivative(&self, delta: f64) -> f64 {
        let a = delta.abs();
        let slope = if a < self.omega { self.omega / (self.epsilon + a) } else { 1.0 };
        if delta > 0.0 {
            slope
        } else if delta < 0.0 {
            -slope
        } else {
            0.0
        }
    }
}

pub fn wing(delta: f64, cfg: &WingConfig) -> f64 {
    cfg.loss(delta)
}

/// Which vertices the Wing term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WingVertices {
    #[default]
    Landmarks,
    All,
}

fn vertex_indices(model: &MorphableModel, which: WingVertices) -> Vec<u32> {
    match which {
        WingVertices::Landmarks => model.landmark_indices.clone(),
        WingVertices::All => (0..model.num_vertices() as u32).collect(),
    }
}

/// Mean Wing loss over the coordinates of `V(gt) − V(pred)` at the 68
/// landmark vertices.
pub fn vertex_wing(model: &MorphableModel, pred: &ParamVector, gt: &ParamVector, cfg: &WingConfig) -> Result<f64> {
    Ok(vertex_wing_with_grad(model, pred, gt, cfg, WingVertices::Landmarks)?.0)
}

/// Value and gradient with respect to `pred`. Only `gt` must hold a valid
/// pose; the raw prediction is used as is.
pub fn vertex_wing_with_grad(
    model: &MorphableModel,
    pred: &ParamVector,
    gt: &ParamVector,
    cfg: &WingConfig,
    which: WingVertices,
) -> Result<(f64, Vec<f64>)> {
    gt.decode_pose()?;
    let indices = vertex_indices(model, which);
    let target = posed(model, gt, &indices)?;
    let local = model.synthesize_vertices(&indices, pred.alpha_id(), pred.alpha_exp())?;
    let (m, t) = (pred.pose_matrix(), pred.translation());
    let count = (3 * indices.len()) as f64;

    let mut value = 0.0;
    let mut grad_m = Matrix3::zeros();
    let mut grad_t = Vector3::zeros();
    let mut grad = vec![0.0; NUM_PARAMS];
    let n3 = model.mean_shape.len();
    for ((&vi, s), v_gt) in indices.iter().zip(&local).zip(&target) {
        let q = Vector3::from(*s) + t;
        let v = m * q;
        let mut dv = Vector3::zeros();
        for a in 0..3 {
            let delta = v_gt[a] - v[a];
            value += cfg.loss(delta);
            dv[a] = -cfg.derivative(delta) / count;
        }
        grad_m += dv * q.transpose();
        let u = m.transpose() * dv;
        grad_t += u;
        let base = 3 * vi as usize;
        for k in 0..NUM_PARAMS - NUM_POSE {
            let col = if k < crate::morphable::NUM_ID {
                &model.id_basis[k * n3 + base..][..3]
            } else {
                &model.exp_basis[(k - crate::morphable::NUM_ID) * n3 + base..][..3]
            };
            grad[NUM_POSE + k] += u.x * col[0] + u.y * col[1] + u.z * col[2];
        }
    }
    for r in 0..3 {
        for c in 0..3 {
            grad[3 * r + c] = grad_m[(r, c)];
        }
    }
    grad[9..12].copy_from_slice(grad_t.as_slice());
    Ok((value / count, grad))
}

fn posed(model: &MorphableModel, p: &ParamVector, indices: &[u32]) -> Result<Vec<[f64; 3]>> {
    if indices.len() == model.landmark_indices.len() && indices == model.landmark_indices.as_slice() {
        return landmark_vertices(model, p);
    }
    let local = model.synthesize_vertices(indices, p.alpha_id(), p.alpha_exp())?;
    let (m, t) = (p.pose_matrix(), p.translation());
    Ok(local
        .into_iter()
        .map(|s| {
            let w = m * (Vector3::from(s) + t);
            [w.x, w.y, w.z]
        })
        .collect())
}

/// `λ₁·wpdc + λ₂·vertex_wing`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub wing: WingConfig,
    pub weights: WpdcWeights,
    pub vertices: WingVertices,
}

impl CombinedLossConfig {
    pub fn new(lambda1: f64, lambda2: f64, wing: WingConfig, weights: WpdcWeights) -> Result<Self> {
        let ok = |l: f64| l >= 0.0 && l.is_finite();
        if !ok(lambda1) || !ok(lambda2) || (lambda1 == 0.0 && lambda2 == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative and not both zero, got λ₁={lambda1}, λ₂={lambda2}"
            )));
        }
        Ok(Self { lambda1, lambda2, wing, weights, vertices: WingVertices::Landmarks })
    }
}

pub fn combined(model: &MorphableModel, pred: &ParamVector, gt: &ParamVector, cfg: &CombinedLossConfig) -> Result<f64> {
    Ok(combined_with_grad(model, pred, gt, cfg)?.0)
}

pub fn combined_with_grad(
    model: &MorphableModel,
    pred: &ParamVector,
    gt: &ParamVector,
    cfg: &CombinedLossConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut value = 0.0;
    let mut grad = vec![0.0; NUM_PARAMS];
    if cfg.lambda1 != 0.0 {
        let (v, g) = wpdc_with_grad(pred.as_slice(), gt.as_slice(), &cfg.weights)?;
        value += cfg.lambda1 * v;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += cfg.lambda1 * b);
    }
    if cfg.lambda2 != 0.0 {
        let (v, g) = vertex_wing_with_grad(model, pred, gt, &cfg.wing, cfg.vertices)?;
        value += cfg.lambda2 * v;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += cfg.lambda2 * b);
    }
    Ok((value, grad))
}

/// Mean combined loss over a row-major `[N, 62]` batch with its gradient.
pub fn combined_batch(
    model: &MorphableModel,
    pred: &[f64],
    gt: &[f64],
    cfg: &CombinedLossConfig,
) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() || pred.is_empty() || !pred.len().is_multiple_of(NUM_PARAMS) {
        return Err(Error::dim(
            "combined_batch",
            format!("prediction has {} values, target {}; both must be N×{NUM_PARAMS}", pred.len(), gt.len()),
        ));
    }
    let n = pred.len() / NUM_PARAMS;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.chunks_exact(NUM_PARAMS).zip(gt.chunks_exact(NUM_PARAMS)) {
        let (v, dg) = combined_with_grad(model, &ParamVector::from_slice(p)?, &ParamVector::from_slice(g)?, cfg)?;
        total += v;
        grad.extend(dg.into_iter().map(|x| x / n as f64));
    }
    Ok((total / n as f64, grad))
}
