//! Adam with decoupled weight decay, learning-rate schedule, gradient
//! clipping, and the EMA teacher update.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then half-cosine
/// decay reaching 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Whether decoupled weight decay applies to a parameter: temperatures,
/// biases and normalization gains are exempt.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('/').next().unwrap_or(name);
    !(leaf.starts_with("log_tau") || name.ends_with(".bias") || name.ends_with(".gain"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { m: ParamStore::new(), v: ParamStore::new(), t: 0 }
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2, eps) = (T::of(cfg.beta1), T::of(cfg.beta2), T::of(cfg.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        let lr_t = T::of(lr);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::CheckpointMismatch(format!("gradient shape of {name}")));
            }
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name).expect("inserted above");
            let v = self.v.get_mut(name).expect("inserted above");
            let decay = if decays(name) { T::one() - lr_t * T::of(cfg.weight_decay) } else { T::one() };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi = *pi * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint l2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let k = T::of(max_norm / total);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    total
}

fn local_name(name: &str) -> &str {
    name.split_once('/').map_or(name, |(_, rest)| rest)
}

/// `θ̄ ← α·θ̄ + (1 − α)·θ` for every teacher parameter.
///
/// Parameters are paired by name after dropping the first path component, so
/// `teacher/x` tracks `student/x`.
pub fn ema_update<T: Scalar>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config(format!("EMA alpha {alpha} outside [0, 1)")));
    }
    if teacher.len() != student.len() {
        return Err(Error::CheckpointMismatch(format!(
            "teacher has {} tensors, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let a = T::of(alpha);
    let b = T::one() - a;
    for ((tn, t), (sn, s)) in teacher.iter_mut().zip(student.iter()) {
        if local_name(tn) != local_name(sn) || t.shape() != s.shape() {
            return Err(Error::CheckpointMismatch(format!("teacher {tn} does not match student {sn}")));
        }
        t.data_mut().iter_mut().zip(s.data()).for_each(|(tv, &sv)| *tv = a * *tv + b * sv);
    }
    Ok(())
}
