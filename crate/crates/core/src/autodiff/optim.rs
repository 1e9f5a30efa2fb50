use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore, Scalar};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, a)| vec![T::zero(); a.len()])
                .collect::<Vec<_>>()
        };
        AdamState {
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `grads[i]` belongs to parameter `i`; parameters without a
    /// gradient are left untouched. A non-finite gradient rejects the whole
    /// step before anything is modified.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
    ) -> Result<(), AutodiffError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(AutodiffError::ParamCount {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if lr.is_nan() || lr <= 0.0 {
            return Err(AutodiffError::InvalidLearningRate(lr));
        }
        for (id, name, array) in params.iter() {
            if let Some(g) = &grads[id.index()] {
                if g.len() != array.len() {
                    return Err(AutodiffError::Shape {
                        kernel: "adam_step",
                        left: array.shape().to_vec(),
                        right: vec![g.len()],
                    });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(AutodiffError::NonFiniteGradient(name.to_string()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.epsilon));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else {
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
/// Steps beyond the end clamp to `lr_min`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    let progress = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        grads
            .iter_mut()
            .flatten()
            .for_each(|g| g.iter_mut().for_each(|v| *v = *v * s));
    }
    norm
}
