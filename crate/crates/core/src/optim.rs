//! SGD with momentum, L2 weight decay and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_CLIP_MAX_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_max_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_max_norm: Some(DEFAULT_CLIP_MAX_NORM),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if let Some(c) = self.clip_max_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_max_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Optimizer hyper-parameters plus one velocity buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<S> {
    pub config: SgdConfig,
    velocity: Vec<Vec<S>>,
}

/// Gradient statistics observed by one step, measured before clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub max_abs_grad: f64,
    pub clip_scale: f64,
}

/// A named parameter handed to the optimizer.
pub struct Param<'a, S> {
    pub name: String,
    pub tensor: &'a mut Tensor<S>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Vec<S>] {
        &self.velocity
    }

    /// Mutable velocity buffer of parameter `index`, if it has been allocated.
    pub fn velocity_mut(&mut self, index: usize) -> Option<&mut [S]> {
        self.velocity.get_mut(index).map(|v| v.as_mut_slice())
    }

    /// Two distinct velocity buffers borrowed together (`a < b`).
    pub fn velocity_pair_mut(&mut self, a: usize, b: usize) -> Option<(&mut [S], &mut [S])> {
        if a >= b || b >= self.velocity.len() {
            return None;
        }
        let (lo, hi) = self.velocity.split_at_mut(b);
        Some((lo[a].as_mut_slice(), hi[0].as_mut_slice()))
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<S>>) {
        self.velocity = velocity;
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

/// Global L2 norm and max magnitude over all parameter gradients, accumulated
/// in `f64` in parameter order.
pub fn gradient_stats<S: Scalar>(params: &[Param<'_, S>]) -> (f64, f64) {
    let mut sq = 0.0f64;
    let mut max = 0.0f64;
    for p in params {
        if let Some(g) = p.tensor.grad() {
            for &v in g {
                let v = v.as_f64();
                sq += v * v;
                max = max.max(v.abs());
            }
        }
    }
    (sq.sqrt(), max)
}

/// One update: clip to `clip_max_norm` (global norm), then
/// `v = momentum * v + (g + weight_decay * w)` and `w -= lr * v`.
pub fn sgd_step<S: Scalar>(params: &mut [Param<'_, S>], state: &mut SgdState<S>) -> Result<StepReport> {
    let cfg = state.config;
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![S::zero(); p.tensor.numel()]).collect();
    }
    if state.velocity.len() != params.len()
        || state.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.tensor.numel())
    {
        return Err(Error::Contract("optimizer velocity does not mirror parameter shapes".into()));
    }

    let (grad_norm, max_abs_grad) = gradient_stats(params);
    let clip_scale = match cfg.clip_max_norm {
        Some(max) if grad_norm > max => max / grad_norm,
        _ => 1.0,
    };
    let scale = S::of(clip_scale);
    let lr = S::of(cfg.learning_rate);
    let mom = S::of(cfg.momentum);
    let wd = S::of(cfg.weight_decay);

    for (p, vel) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let name = &p.name;
        let (w, g) = p.tensor.data_and_grad_mut();
        for ((wi, gi), vi) in w.iter_mut().zip(g.iter()).zip(vel.iter_mut()) {
            let gc = *gi * scale;
            if !gc.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter `{name}` after clipping (pre-clip norm {grad_norm})"
                )));
            }
            *vi = mom * *vi + (gc + wd * *wi);
            *wi -= lr * *vi;
        }
    }
    Ok(StepReport { grad_norm, max_abs_grad, clip_scale })
}
