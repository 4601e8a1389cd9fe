//! AdamW with decoupled weight decay and a linear warmup schedule.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::lm::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimHyper {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub grad_accum_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self::llm_kg()
    }
}

impl OptimHyper {
    /// Text-only instruction tuning: lr 1e-4, no warmup.
    pub fn llm_kg() -> Self {
        Self {
            lr_peak: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            grad_accum_steps: 2,
            batch_size: 2,
            epochs: 5,
            clip_norm: Some(1.0),
        }
    }

    /// Visual instruction tuning: lr 2e-5 with 5000 warmup steps.
    pub fn vlm_kg() -> Self {
        Self {
            lr_peak: 2e-5,
            warmup_steps: 5000,
            ..Self::llm_kg()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return fail("lr_peak must be positive");
        }
        if self.grad_accum_steps == 0 || self.batch_size == 0 {
            return fail("grad_accum_steps and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("eps must be positive and weight_decay non-negative");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return fail("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `lr_peak` over `warmup_steps`, constant after.
pub fn lr_at(step: u64, hyper: &OptimHyper) -> f64 {
    if hyper.warmup_steps == 0 || step >= hyper.warmup_steps {
        hyper.lr_peak
    } else {
        hyper.lr_peak * step as f64 / hyper.warmup_steps as f64
    }
}

/// First and second moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamState {
    /// Decay applies to matrices other than the learned prefix constant.
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            decay: params
                .iter()
                .map(|(name, t)| t.shape().len() == 2 && !name.contains("prefix"))
                .collect(),
        }
    }

    pub fn decays(&self, i: usize) -> bool {
        self.decay[i]
    }
}

/// One AdamW update with bias correction at 1-based `step`:
/// `p ← p − lr·(m̂/(√v̂ + eps) + wd·p)`. Gradients are read from
/// [`Tensor::grad`]; nothing changes when any of them is non-finite.
pub fn adamw_step(
    params: &mut [Tensor],
    state: &mut AdamState,
    hyper: &OptimHyper,
    step: u64,
    lr: f64,
) -> Result<(), TrainError> {
    assert!(step >= 1, "optimizer steps are 1-based");
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(TrainError::NonFiniteGradient(i));
        }
    }
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]);
        let wd = if state.decay[i] { hyper.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *x -= lr * (mh / (vh.sqrt() + hyper.eps) + wd * *x);
        }
    }
    Ok(())
}

/// Euclidean norm over all gradients.
pub fn grad_norm<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    tensors
        .into_iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn scale_grads(tensors: &mut [Tensor], factor: f64) {
    for t in tensors {
        if let Some(g) = t.grad() {
            let scaled: Vec<f64> = g.iter().map(|x| x * factor).collect();
            t.zero_grad();
            t.accumulate_grad(&scaled);
        }
    }
}
