//! Loss through the network, learning-rate schedule and a minimal trainer.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::losses::{combined_batch, wpdc_weights_from_std, CombinedLossConfig, WingConfig, WpdcWeights};
use crate::morphable::{EulerPose, MorphableModel, ParamVector, NUM_EXP, NUM_ID, NUM_PARAMS, NUM_POSE};
use crate::network::{
    build_network, denormalize, init_params, BuildOptions, Forward, NetworkSpec, RunMode, Variant, TARGET_MEAN,
    TARGET_STD,
};
use crate::tensor::{finite_diff_check_coords, AdamState, Float, Graph, ParamKind, ParamStore, Tensor, Var};

/// Appends the combined loss of the network output `raw` (`[N, 62]`,
/// normalized) against `targets` (row-major `N × 62`, parameter space) and
/// returns the scalar loss variable.
pub fn attach_loss<T: Float>(
    graph: &mut Graph<T>,
    params: &ParamStore<T>,
    raw: Var,
    targets: &[f64],
    model: &MorphableModel,
    cfg: &CombinedLossConfig,
) -> Result<Var> {
    let out = graph.value(raw).data().to_vec();
    let pred = denormalize(params, &out)?;
    let (value, grad) = combined_batch(model, &pred, targets, cfg)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("combined loss evaluated to {value}")));
    }
    let std = params.get(TARGET_STD)?.data();
    let grad_raw: Vec<f64> = grad.iter().enumerate().map(|(i, g)| g * std[i % NUM_PARAMS].as_f64()).collect();
    let grad_t = Tensor::from_f64(graph.shape(raw).to_vec(), &grad_raw)?;
    graph.objective(raw, T::from_f64(value), grad_t)
}

/// Per-coordinate mean and standard deviation of a target set, with a
/// floor on the deviation so constant coordinates stay well defined.
pub fn target_statistics(targets: &[ParamVector]) -> Result<(Vec<f64>, Vec<f64>)> {
    if targets.is_empty() {
        return Err(Error::Config("no training targets".into()));
    }
    let n = targets.len() as f64;
    let mut mean = vec![0.0; NUM_PARAMS];
    for t in targets {
        mean.iter_mut().zip(t.as_slice()).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; NUM_PARAMS];
    for t in targets {
        for k in 0..NUM_PARAMS {
            var[k] += (t.0[k] - mean[k]).powi(2) / n;
        }
    }
    let std = var.into_iter().map(|v| v.sqrt().max(1e-3)).collect();
    Ok((mean, std))
}

/// WPDC weights with pose entries from the training set's pose spread and
/// shape entries from the model's standard deviations.
pub fn training_weights(model: &MorphableModel, target_std: &[f64]) -> Result<WpdcWeights> {
    let mut std = model.param_std.clone();
    std[..NUM_POSE].copy_from_slice(&target_std[..NUM_POSE]);
    wpdc_weights_from_std(&std)
}

/// Step learning rate: `base · factor^k` where `k` counts the milestones
/// already passed.
pub fn learning_rate(step: usize, base: f64, milestones: &[usize], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| step >= m).count();
    base * factor.powi(passed as i32)
}

/// Milestones at 15, 25 and 30 out of 40 epochs, rescaled to `total` steps.
pub fn scaled_milestones(total: usize) -> Vec<usize> {
    [15, 25, 30].iter().map(|&e| (e * total).div_ceil(40)).collect()
}

/// Owns the network weights and optimizer state across steps.
pub struct Trainer<'m> {
    pub spec: NetworkSpec,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub model: &'m MorphableModel,
    pub loss: CombinedLossConfig,
}

impl<'m> Trainer<'m> {
    pub fn new(
        spec: NetworkSpec,
        mut params: ParamStore<f32>,
        model: &'m MorphableModel,
        loss: CombinedLossConfig,
        target_mean: &[f64],
        target_std: &[f64],
    ) -> Result<Self> {
        *params.get_mut(TARGET_MEAN)? = Tensor::from_f64([NUM_PARAMS], target_mean)?;
        *params.get_mut(TARGET_STD)? = Tensor::from_f64([NUM_PARAMS], target_std)?;
        Ok(Self { spec, params, adam: AdamState::new(0.0), model, loss })
    }

    /// One Adam step on a batch; returns the loss before the update.
    /// Neither weights nor running statistics change if the step fails.
    pub fn step(&mut self, images: &Tensor<f32>, targets: &[f64], lr: f64) -> Result<f64> {
        let snapshot = self.params.clone();
        let result = self.try_step(images, targets, lr);
        if result.is_err() {
            self.params = snapshot;
        }
        result
    }

    fn try_step(&mut self, images: &Tensor<f32>, targets: &[f64], lr: f64) -> Result<f64> {
        let mut graph = Graph::new();
        let x = graph.constant(images.clone());
        let (raw, bindings) = {
            let mut fwd = Forward::new(&mut graph, &mut self.params, RunMode::Train { update_stats: true });
            let raw = fwd.network(&self.spec, x)?;
            (raw, fwd.bindings().clone())
        };
        let loss = attach_loss(&mut graph, &self.params, raw, targets, self.model, &self.loss)?;
        let value = graph.value(loss).item()?.as_f64();
        graph.backward(loss)?;
        let grads: IndexMap<String, Tensor<f32>> = bindings
            .iter()
            .filter(|(name, _)| self.params.kind(name) == Some(ParamKind::Trainable))
            .filter_map(|(name, &v)| graph.grad(v).map(|g| (name.clone(), g.clone())))
            .collect();
        self.adam.lr = lr;
        self.adam.step(&mut self.params, &grads)?;
        Ok(value)
    }

    /// Loss of the current weights in evaluation mode.
    pub fn eval_loss(&mut self, images: &Tensor<f32>, targets: &[f64]) -> Result<f64> {
        let mut graph = Graph::new();
        let x = graph.constant(images.clone());
        let raw = Forward::new(&mut graph, &mut self.params, RunMode::Eval).network(&self.spec, x)?;
        let loss = attach_loss(&mut graph, &self.params, raw, targets, self.model, &self.loss)?;
        Ok(graph.value(loss).item()?.as_f64())
    }
}

/// Parameter vectors predicted for `[N, 3, H, W]` images in evaluation mode.
pub fn predict(spec: &NetworkSpec, params: &mut ParamStore<f32>, images: &Tensor<f32>) -> Result<Vec<ParamVector>> {
    let mut graph = Graph::new();
    let x = graph.constant(images.clone());
    let raw = Forward::new(&mut graph, params, RunMode::Eval).requires_grad(false).network(spec, x)?;
    let out = graph.value(raw).data().to_vec();
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("network produced non-finite outputs".into()));
    }
    denormalize(params, &out)?.chunks_exact(NUM_PARAMS).map(ParamVector::from_slice).collect()
}

/// Outcome of [`network_gradient_check`].
#[derive(Debug, Clone)]
pub struct GradientReport {
    /// Largest relative error over all probed coordinates.
    pub worst: f64,
    /// Input image or parameter tensor holding the worst coordinate.
    pub worst_at: String,
    pub probes: usize,
}

/// Central differences of the combined loss through the toy DAMDNet in
/// `f64` (batch 2, 32×32, train-mode batch norm without statistic
/// updates) against the taped gradient. Probes `input_coords` random
/// pixels and `per_tensor` random entries of every trainable tensor.
pub fn network_gradient_check(
    model: &MorphableModel,
    seed: u64,
    input_coords: usize,
    per_tensor: usize,
) -> Result<GradientReport> {
    const H: f64 = 1e-6;
    let opts = BuildOptions::toy();
    let spec = build_network(Variant::Damd, &opts)?;
    let mut rng = crate::rng::Rng::seed_from_u64(seed);
    let params: ParamStore<f64> = init_params(&spec, &mut rng)?;
    let mut targets = Vec::new();
    for _ in 0..2 {
        let pose = EulerPose {
            f: 0.8,
            pitch: rng.random_range(-0.3..0.3),
            yaw: rng.random_range(-1.0..1.0),
            roll: rng.random_range(-0.3..0.3),
            t3d: [0.1, 0.0, 0.0],
        };
        let id: Vec<f64> = (0..NUM_ID).map(|k| rng.random_range(-1.0..1.0) * model.param_std[NUM_POSE + k]).collect();
        let ex: Vec<f64> =
            (0..NUM_EXP).map(|k| rng.random_range(-1.0..1.0) * model.param_std[NUM_POSE + NUM_ID + k]).collect();
        targets.extend_from_slice(ParamVector::from_parts(&pose, &id, &ex)?.as_slice());
    }
    let cfg = CombinedLossConfig::new(0.5, 1.0, WingConfig::default(), training_weights(model, &[0.5; NUM_PARAMS])?)?;
    let n = opts.input_size;
    let image = Tensor::new(vec![2, 3, n, n], (0..6 * n * n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let mode = RunMode::Train { update_stats: false };

    let coords: Vec<usize> = (0..input_coords).map(|_| rng.random_range(0..image.numel())).collect();
    let mut report = GradientReport { worst: 0.0, worst_at: "input".into(), probes: coords.len() };
    report.worst = finite_diff_check_coords(
        |g, x| {
            let raw = Forward::new(g, &mut params.clone(), mode).network(&spec, x)?;
            attach_loss(g, &params, raw, &targets, model, &cfg)
        },
        &image,
        H,
        &coords,
    )?;
    let tensors: Vec<(String, Tensor<f64>)> = params.trainable().map(|(n, t)| (n.to_string(), t.clone())).collect();
    for (name, value) in &tensors {
        let coords: Vec<usize> = (0..per_tensor).map(|_| rng.random_range(0..value.numel())).collect();
        let err = finite_diff_check_coords(
            |g, p| {
                let x = g.constant(image.clone());
                let mut local = params.clone();
                let mut fwd = Forward::new(g, &mut local, mode);
                fwd.bind(name.clone(), p);
                let raw = fwd.network(&spec, x)?;
                attach_loss(g, &params, raw, &targets, model, &cfg)
            },
            value,
            H,
            &coords,
        )?;
        report.probes += coords.len();
        if err > report.worst {
            report.worst = err;
            report.worst_at = name.clone();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_decay_sequence() {
        let ms = scaled_milestones(40);
        assert_eq!(ms, vec![15, 25, 30]);
        let lrs: Vec<f64> = [0, 15, 25, 30, 39].iter().map(|&s| learning_rate(s, 0.01, &ms, 0.2)).collect();
        for (got, want) in lrs.iter().zip([0.01, 0.002, 0.0004, 0.00008, 0.00008]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(scaled_milestones(500), vec![188, 313, 375]);
    }
}
