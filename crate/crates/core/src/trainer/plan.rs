use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::model::{MaskMode, SharingMode};
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::task::TaskType;

/// Task-type sample weights `w_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleWeights {
    pub reid: f64,
    pub par: f64,
    pub seg: f64,
    pub pose: f64,
    pub peddet: f64,
}

impl Default for SampleWeights {
    fn default() -> Self {
        SampleWeights {
            reid: 10.0,
            par: 0.01,
            seg: 5.0,
            pose: 2000.0,
            peddet: 2.0,
        }
    }
}

impl SampleWeights {
    pub fn get(&self, t: TaskType) -> f64 {
        match t {
            TaskType::Reid => self.reid,
            TaskType::Par => self.par,
            TaskType::Seg => self.seg,
            TaskType::Pose => self.pose,
            TaskType::PedDet => self.peddet,
        }
    }
}

/// One dataset in the joint plan. `batch_size` is the per-step batch `b_D`
/// entering the loss-weight formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDataset {
    pub id: String,
    /// Task whose queries this dataset trains.
    pub task_id: String,
    pub task_type: TaskType,
    pub batch_size: usize,
}

impl PlanDataset {
    /// Batch from a nominal per-task batch; detection is scaled by
    /// `det_factor` and rounded, never below 1.
    pub fn from_nominal(
        id: impl Into<String>,
        task_id: impl Into<String>,
        task_type: TaskType,
        nominal: usize,
        det_factor: f64,
    ) -> Self {
        let b = if task_type == TaskType::PedDet {
            ((nominal as f64 * det_factor).round() as usize).max(1)
        } else {
            nominal
        };
        PlanDataset {
            id: id.into(),
            task_id: task_id.into(),
            task_type,
            batch_size: b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    /// Ceiling of the second-moment decay `min(1 − t^−decay_rate, cap)`.
    pub beta2_cap: f64,
    pub decay_rate: f64,
    pub eps1: f64,
    /// Update clipping threshold `d` on the RMS of the normalized update.
    pub clip_threshold: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2_cap: 0.999,
            decay_rate: 0.8,
            eps1: 1e-30,
            clip_threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub datasets: Vec<PlanDataset>,
    #[serde(default)]
    pub sample_weights: SampleWeights,
    #[serde(default = "d_det_factor")]
    pub det_batch_factor: f64,
    /// Micro-batches per detection batch; gradients accumulate across them.
    #[serde(default = "d_one")]
    pub det_micro_batches: usize,
    pub total_steps: u64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "d_peak")]
    pub peak_lr: f64,
    #[serde(default = "d_layer_decay")]
    pub layer_decay: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_drop_path")]
    pub drop_path: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub sharing_mode: SharingMode,
    #[serde(default)]
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub seed: u64,
}

fn d_det_factor() -> f64 {
    0.6
}
fn d_one() -> usize {
    1
}
fn d_warmup() -> u64 {
    1500
}
fn d_peak() -> f64 {
    1e-3
}
fn d_layer_decay() -> f64 {
    0.75
}
fn d_wd() -> f64 {
    0.05
}
fn d_drop_path() -> f64 {
    0.2
}

impl TrainPlan {
    /// The published recipe applied to `datasets`.
    pub fn paper(datasets: Vec<PlanDataset>, total_steps: u64) -> Self {
        TrainPlan {
            datasets,
            sample_weights: SampleWeights::default(),
            det_batch_factor: d_det_factor(),
            det_micro_batches: 1,
            total_steps,
            warmup_steps: d_warmup(),
            peak_lr: d_peak(),
            layer_decay: d_layer_decay(),
            weight_decay: d_wd(),
            drop_path: d_drop_path(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            sharing_mode: SharingMode::Baseline,
            mask_mode: MaskMode::Full,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::config("training plan lists no datasets"));
        }
        let mut seen = BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(&d.id) {
                return Err(Error::config(format!("duplicate dataset `{}` in plan", d.id)));
            }
            if d.batch_size == 0 {
                return Err(Error::config(format!("dataset `{}` has batch size 0", d.id)));
            }
        }
        for t in TaskType::ALL {
            let w = self.sample_weights.get(t);
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::config(format!("sample weight for {t} must be positive")));
            }
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup ({}) must be shorter than the run ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak learning rate must be positive"));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::config("layer decay must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config("drop-path rate must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.det_micro_batches == 0 {
            return Err(Error::config("weight decay must be >= 0 and micro-batches >= 1"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2_cap) || o.clip_threshold <= 0.0 {
            return Err(Error::config("invalid optimizer hyperparameters"));
        }
        self.loss.validate()
    }
}

/// `b_D · w_t` per dataset.
pub fn loss_weight_products(plan: &TrainPlan) -> BTreeMap<String, f64> {
    plan.datasets
        .iter()
        .map(|d| (d.id.clone(), d.batch_size as f64 * plan.sample_weights.get(d.task_type)))
        .collect()
}

/// `w_D = b_D w_t / Σ b w`.
pub fn compute_loss_weights(plan: &TrainPlan) -> Result<BTreeMap<String, f64>> {
    if plan.datasets.is_empty() {
        return Err(Error::config("no datasets to weight"));
    }
    let products = loss_weight_products(plan);
    let sum: f64 = products.values().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(Error::config("loss-weight normalizer is not positive"));
    }
    Ok(products.into_iter().map(|(k, v)| (k, v / sum)).collect())
}

/// Learning rate for optimizer step `step`: linear warmup from 0 to the
/// peak at `warmup_steps`, then cosine decay to 0 at `total_steps`. The
/// first update is step 1.
pub fn lr_at(step: u64, plan: &TrainPlan) -> f64 {
    let (w, t) = (plan.warmup_steps, plan.total_steps);
    let step = step.min(t);
    if step <= w {
        if w == 0 {
            return plan.peak_lr;
        }
        return plan.peak_lr * step as f64 / w as f64;
    }
    let progress = (step - w) as f64 / (t - w) as f64;
    (0.5 * plan.peak_lr * (1.0 + (PI * progress).cos())).max(0.0)
}

/// Learning-rate multiplier of a parameter. Encoder block `i` of `depth`
/// gets `decay^(depth − i)` (top block `decay`), the patch projection and
/// positional table `decay^(depth + 1)`; everything outside the encoder
/// and the encoder's final norm get 1.
pub fn layer_decay_scale(name: &str, encoder_depth: usize, decay: f64) -> Result<f64> {
    let Some(rest) = name.strip_prefix("encoder.") else {
        let known = ["decoder", "interpreter", "queries.", "aux."];
        if known.iter().any(|k| name.starts_with(k)) {
            return Ok(1.0);
        }
        return Err(Error::UnknownParam(name.to_string()));
    };
    if rest.starts_with("patch_proj.") || rest == "pos_embed" {
        return Ok(decay.powi(encoder_depth as i32 + 1));
    }
    if rest.starts_with("norm.") {
        return Ok(1.0);
    }
    if let Some(b) = rest.strip_prefix("block") {
        let idx: usize = b
            .split('.')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if idx < encoder_depth {
            return Ok(decay.powi((encoder_depth - idx) as i32));
        }
    }
    Err(Error::UnknownParam(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(ds: Vec<(&str, TaskType, usize)>) -> TrainPlan {
        TrainPlan::paper(
            ds.into_iter()
                .map(|(id, t, b)| PlanDataset {
                    id: id.into(),
                    task_id: id.into(),
                    task_type: t,
                    batch_size: b,
                })
                .collect(),
            10_000,
        )
    }

    #[test]
    fn two_dataset_weights() {
        let p = plan(vec![("reid", TaskType::Reid, 96), ("seg", TaskType::Seg, 58)]);
        let prod = loss_weight_products(&p);
        assert_eq!(prod["reid"], 960.0);
        assert_eq!(prod["seg"], 290.0);
        let w = compute_loss_weights(&p).unwrap();
        assert!((w["reid"] - 0.768).abs() < 1e-12);
        assert!((w["seg"] - 0.232).abs() < 1e-12);
        let single = plan(vec![("a", TaskType::Par, 3)]);
        assert_eq!(compute_loss_weights(&single).unwrap()["a"], 1.0);
    }

    #[test]
    fn schedule_shape() {
        let p = plan(vec![("a", TaskType::Par, 1)]);
        assert_eq!(lr_at(0, &p), 0.0);
        assert!((lr_at(1500, &p) - 1e-3).abs() < 1e-15);
        assert_eq!(lr_at(10_000, &p), 0.0);
        assert!((lr_at(1501, &p) - lr_at(1500, &p)).abs() < 1e-9);
        assert!((0..=10_000).all(|s| lr_at(s, &p) >= 0.0));
    }

    #[test]
    fn layer_decay_convention() {
        assert_eq!(layer_decay_scale("encoder.block11.attn.qkv.weight", 12, 0.75).unwrap(), 0.75);
        let pp = layer_decay_scale("encoder.patch_proj.weight", 12, 0.75).unwrap();
        assert!((pp - 0.75f64.powi(13)).abs() < 1e-15);
        assert!((pp - 0.0238).abs() < 1e-4);
        assert_eq!(layer_decay_scale("decoder.block0.ffn.fc1.weight", 12, 0.75).unwrap(), 1.0);
        assert!(layer_decay_scale("encoder.block12.x", 12, 0.75).is_err());
        assert!(layer_decay_scale("mystery", 12, 0.75).is_err());
    }

    #[test]
    fn detection_nominal_batch_is_scaled() {
        let d = PlanDataset::from_nominal("det", "det", TaskType::PedDet, 10, 0.6);
        assert_eq!(d.batch_size, 6);
        let r = PlanDataset::from_nominal("r", "r", TaskType::Reid, 10, 0.6);
        assert_eq!(r.batch_size, 10);
    }
}
