//! AdamW with decoupled weight decay, global-norm gradient clipping and
//! a linear-warmup/cosine-decay learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear warmup from 0 to `max_lr`, then cosine decay to 0 at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }
}

/// Learning rate at `step` (0-based position in the schedule).
/// Steps past the end clamp to 0 with a warning on stderr.
pub fn cosine_lr(step: usize, schedule: &LrSchedule) -> f64 {
    let total = schedule.total_steps;
    if step > total {
        eprintln!(
            "warning: lr schedule queried at step {step} past total_steps {total}; clamping to 0"
        );
        return 0.0;
    }
    let warmup = schedule.warmup_steps();
    if step < warmup {
        return schedule.max_lr * step as f64 / warmup as f64;
    }
    if total == warmup {
        return if step == warmup { schedule.max_lr } else { 0.0 };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    schedule.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-tensor first/second moment buffers. Only trainable tensors are
/// ever present in the maps.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    first_moment: BTreeMap<String, Vec<f32>>,
    second_moment: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64, schedule: LrSchedule) -> Self {
        OptimizerState {
            step: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
            lr_schedule: schedule,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Number of tensors with allocated moment buffers.
    pub fn tracked_tensors(&self) -> usize {
        self.first_moment.len()
    }

    pub fn has_state_for(&self, name: &str) -> bool {
        self.first_moment.contains_key(name)
    }
}

/// One AdamW update over named parameters.
///
/// `params` and `grads` must pair tensors by name; order is the fixed
/// canonical order the caller iterates in. The global gradient norm is
/// clipped to `clip_norm` before the moment updates, then decoupled
/// weight decay and the moment-based step are applied. Every gradient
/// is validated before any parameter is touched, so a rejected step
/// leaves the parameters unchanged.
pub fn adamw_step(
    params: &mut [(String, Tensor)],
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    clip_norm: f64,
) -> Result<()> {
    assert!(clip_norm > 0.0, "clip_norm must be positive");

    for (name, _) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingTensor { name: name.clone() })?;
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: name.clone(),
            });
        }
    }

    // Global L2 norm in f64, fixed iteration order.
    let mut sq = 0.0f64;
    for (name, _) in params.iter() {
        for &v in grads[name.as_str()].data() {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    let clip_scale = if norm > clip_norm {
        (clip_norm / norm) as f32
    } else {
        1.0
    };

    let t = state.step + 1;
    let lr = cosine_lr(state.step, &state.lr_schedule);
    let bias1 = 1.0 - state.beta1.powi(t as i32);
    let bias2 = 1.0 - state.beta2.powi(t as i32);
    let beta1 = state.beta1 as f32;
    let beta2 = state.beta2 as f32;
    let eps = state.eps as f32;
    let step_size = (lr / bias1) as f32;
    let inv_bias2 = (1.0 / bias2) as f32;
    let decay = (1.0 - lr * state.weight_decay) as f32;

    for (name, param) in params.iter_mut() {
        let g = &grads[name.as_str()];
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; param.len()]);
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; param.len()]);
        debug_assert_eq!(m.len(), param.len());
        for (((p, &graw), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gc = graw * clip_scale;
            *mi = beta1 * *mi + (1.0 - beta1) * gc;
            *vi = beta2 * *vi + (1.0 - beta2) * gc * gc;
            let denom = (*vi * inv_bias2).sqrt() + eps;
            *p = *p * decay - step_size * (*mi / denom);
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(max_lr: f64, warmup_ratio: f64, total: usize) -> LrSchedule {
        LrSchedule {
            max_lr,
            warmup_ratio,
            total_steps: total,
        }
    }

    #[test]
    fn lr_ramp_endpoint_is_exact_max() {
        let s = schedule(2e-4, 0.02, 500);
        assert_eq!(s.warmup_steps(), 10);
        assert_eq!(cosine_lr(10, &s), 2e-4);
    }

    #[test]
    fn lr_final_step_is_zero() {
        let s = schedule(2e-4, 0.02, 500);
        assert_eq!(cosine_lr(500, &s), 0.0);
    }

    #[test]
    fn lr_decay_midpoint_is_half_max() {
        let s = schedule(2e-4, 0.0, 1000);
        let lr = cosine_lr(500, &s);
        assert!((lr - 1e-4).abs() < 1e-9, "{lr}");
    }

    #[test]
    fn lr_past_end_clamps_to_zero() {
        let s = schedule(2e-4, 0.02, 100);
        assert_eq!(cosine_lr(101, &s), 0.0);
    }

    fn one_param(v: f32) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_grads_zero_decay_is_identity() {
        let p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut params = vec![("w".to_string(), p)];
        let mut state = OptimizerState::new(0.9, 0.95, 1e-8, 0.0, schedule(0.01, 0.0, 10));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[3]));
        adamw_step(&mut params, &grads, &mut state, 1.0).unwrap();
        assert_eq!(params[0].1, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_grads_with_decay_scales_params() {
        // lr=0.01, wd=0.1 -> each param multiplied by 1 - 0.001.
        let mut params = vec![(
            "w".to_string(),
            Tensor::from_vec(&[2], vec![4.0, -8.0]).unwrap(),
        )];
        let mut state = OptimizerState::new(0.9, 0.95, 1e-8, 0.1, schedule(0.01, 0.0, 10));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        adamw_step(&mut params, &grads, &mut state, 1.0).unwrap();
        assert_eq!(params[0].1.data(), &[4.0 * (1.0 - 0.001), -8.0 * (1.0 - 0.001)]);
    }

    #[test]
    fn clipping_caps_the_gradient_entering_moments() {
        let mut params = vec![("w".to_string(), one_param(1.0))];
        let mut state = OptimizerState::new(0.9, 0.95, 1e-8, 0.0, schedule(0.01, 0.0, 10));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), one_param(10.0));
        adamw_step(&mut params, &grads, &mut state, 1.0).unwrap();
        // effective grad 1.0: m = (1-beta1) * 1.0
        let m = state.first_moment["w"][0];
        assert!((m - 0.1).abs() < 1e-7, "m = {m}");
    }

    #[test]
    fn nan_gradient_is_rejected_with_name() {
        let mut params = vec![("block.3.wq".to_string(), one_param(1.0))];
        let mut state = OptimizerState::new(0.9, 0.95, 1e-8, 0.0, schedule(0.01, 0.0, 10));
        let mut grads = BTreeMap::new();
        grads.insert("block.3.wq".to_string(), one_param(f32::NAN));
        let err = adamw_step(&mut params, &grads, &mut state, 1.0).unwrap_err();
        assert!(err.to_string().contains("block.3.wq"), "{err}");
        assert_eq!(state.step, 0, "aborted step must not advance the counter");
        assert_eq!(params[0].1.data(), &[1.0], "aborted step must not move params");
    }

    #[test]
    fn moments_allocated_lazily_per_tensor() {
        let mut params = vec![("w".to_string(), one_param(1.0))];
        let mut state = OptimizerState::new(0.9, 0.95, 1e-8, 0.0, schedule(0.01, 0.0, 10));
        assert_eq!(state.tracked_tensors(), 0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), one_param(0.5));
        adamw_step(&mut params, &grads, &mut state, 1.0).unwrap();
        assert_eq!(state.tracked_tensors(), 1);
        assert!(state.has_state_for("w"));
        assert!(!state.has_state_for("frozen"));
    }
}
