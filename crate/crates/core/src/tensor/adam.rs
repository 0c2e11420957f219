use indexmap::IndexMap;

use super::{Float, ParamKind, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam optimizer state: step count, per-parameter moments and the
/// hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState<T: Float = f32> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.v.get(name).map(Vec::as_slice)
    }

    /// One bias-corrected Adam update of every trainable parameter that has
    /// a gradient. Any non-finite gradient aborts the step before a single
    /// parameter moves.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            if params.kind(name) != Some(ParamKind::Trainable) {
                return Err(Error::Config(format!("gradient for non-trainable `{name}`")));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("`{name}`: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}` at element {pos} is {:?}", g.data()[pos])));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let step_size = T::from_f64(self.lr / c1);
        let inv_c2 = T::from_f64(1.0 / c2);
        let eps = T::from_f64(self.eps);
        for (name, g) in grads {
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let p = params.get_mut(name)?.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                p[i] -= step_size * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    state.step(params, grads)
}
