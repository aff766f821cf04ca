//! Task losses, detection matching, auxiliary supervision and the
//! multi-dataset objective.

mod losses;
mod matching;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpreter::UnitOutputs;
use crate::nn::Linear;
use crate::task::TaskType;

pub use losses::{
    box_corners, det_terms, dice_loss, focal_cost, focal_loss, gaussian_heatmap, giou,
    giou_tensor, heatmap_mse, mask_bce_loss, par_loss, par_weight, reid_terms, DetTerms,
    ReidTerms, EPS,
};
pub use matching::{
    brute_force, brute_force_match, det_cost_matrix, hungarian, hungarian_match, Assignment,
    BRUTE_FORCE_MAX,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_par_pose: f64,
    pub lambda_par_seg: f64,
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_iou: f64,
    pub triplet_margin: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_par_pose: 0.001,
            lambda_par_seg: 0.001,
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_iou: 2.0,
            triplet_margin: 0.3,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_par_pose,
            self.lambda_par_seg,
            self.lambda_cls,
            self.lambda_l1,
            self.lambda_iou,
            self.triplet_margin,
            self.focal_alpha,
            self.focal_gamma,
            self.dice_smooth,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.focal_alpha > 1.0 {
            return Err(Error::config("focal alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Batched ground truth for one task. Map targets live at the interpreter's
/// map resolution.
#[derive(Debug, Clone)]
pub enum TaskTargets {
    Reid {
        identities: Vec<usize>,
    },
    Par {
        /// `[B, N]` 0/1 labels.
        labels: Tensor,
        ratios: Vec<f64>,
    },
    Seg {
        /// `[B, N, H', W']` one-hot class masks.
        masks: Tensor,
        /// `[B, N]` class presence bits.
        presence: Tensor,
        presence_ratios: Vec<f64>,
        /// `[B, H', W']` valid (unpadded) pixels.
        valid: Option<Tensor>,
    },
    Pose {
        /// `[B, K, H', W']` unit-peak Gaussians, zero for invisible joints.
        heatmaps: Tensor,
        /// `[B, K]` visibility bits.
        visible: Tensor,
        visibility_ratios: Vec<f64>,
        valid: Option<Tensor>,
    },
    Det {
        /// Per image, normalized `(cx, cy, h, w)` boxes.
        boxes: Vec<Vec<[f64; 4]>>,
    },
}

impl TaskTargets {
    pub fn task_type(&self) -> TaskType {
        match self {
            TaskTargets::Reid { .. } => TaskType::Reid,
            TaskTargets::Par { .. } => TaskType::Par,
            TaskTargets::Seg { .. } => TaskType::Seg,
            TaskTargets::Pose { .. } => TaskType::Pose,
            TaskTargets::Det { .. } => TaskType::PedDet,
        }
    }
}

/// Training-only ID classifier for re-identification.
#[derive(Debug, Clone)]
pub struct IdClassifier {
    pub linear: Linear,
    pub num_ids: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub weights: &'a LossWeights,
    pub id_classifier: Option<&'a IdClassifier>,
}

/// A differentiable total plus named scalar terms for logging.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub terms: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl LossBreakdown {
    pub fn value(&self) -> Result<f64> {
        Ok(self.total.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

fn val(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn need<'a>(t: &'a Option<Tensor>, unit: &str) -> Result<&'a Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::config(format!("interpreter output lacks the {unit} unit")))
}

/// Loss of one supervised layer.
pub fn task_loss(
    outputs: &UnitOutputs,
    targets: &TaskTargets,
    ctx: LossContext<'_>,
) -> Result<LossBreakdown> {
    let w = ctx.weights;
    let mut terms = BTreeMap::new();
    let mut warnings = Vec::new();
    let total = match targets {
        TaskTargets::Reid { identities } => {
            let cls = ctx
                .id_classifier
                .ok_or_else(|| Error::config("re-identification needs an ID classifier"))?;
            let r = reid_terms(
                need(&outputs.y_f, "feature")?,
                identities,
                &cls.linear,
                cls.num_ids,
                w.triplet_margin,
            )?;
            if !r.triplet_valid {
                warnings.push("batch has no valid triplet".into());
            }
            terms.insert("id".into(), val(&r.id)?);
            terms.insert("triplet".into(), val(&r.triplet)?);
            (r.id + r.triplet)?
        }
        TaskTargets::Par { labels, ratios } => {
            let l = par_loss(need(&outputs.y_p, "global")?, labels, ratios)?;
            terms.insert("par".into(), val(&l)?);
            l
        }
        TaskTargets::Seg {
            masks,
            presence,
            presence_ratios,
            valid,
        } => {
            let ym = need(&outputs.y_m, "map")?;
            let cls = par_loss(need(&outputs.y_p, "global")?, presence, presence_ratios)?;
            let bce = mask_bce_loss(ym, masks, valid.as_ref())?;
            let dice = dice_loss(ym, masks, valid.as_ref(), w.dice_smooth)?;
            terms.insert("par".into(), val(&cls)?);
            terms.insert("bce".into(), val(&bce)?);
            terms.insert("dice".into(), val(&dice)?);
            (((cls * w.lambda_par_seg)? + bce)? + dice)?
        }
        TaskTargets::Pose {
            heatmaps,
            visible,
            visibility_ratios,
            valid,
        } => {
            let ym = need(&outputs.y_m, "map")?;
            let cls = par_loss(need(&outputs.y_p, "global")?, visible, visibility_ratios)?;
            let mse = heatmap_mse(ym, heatmaps, visible, valid.as_ref())?;
            terms.insert("par".into(), val(&cls)?);
            terms.insert("mse".into(), val(&mse)?);
            ((cls * w.lambda_par_pose)? + mse)?
        }
        TaskTargets::Det { boxes } => {
            let probs = need(&outputs.y_p, "global")?;
            let pred = need(&outputs.y_bbox, "bbox")?;
            let b = pred.dim(0)?;
            if boxes.len() != b {
                return Err(Error::shape("det", format!("{b} images, {} box lists", boxes.len())));
            }
            let mut total: Option<Tensor> = None;
            let (mut cls_sum, mut l1_sum, mut iou_sum) = (0.0, 0.0, 0.0);
            for (i, gt) in boxes.iter().enumerate() {
                let p = probs.get(i)?.flatten_all()?;
                let bx = pred.get(i)?;
                let a = match_image(&p, &bx, gt, w)?;
                let t = det_terms(&p, &bx, gt, &a, w)?;
                cls_sum += val(&t.cls)?;
                l1_sum += val(&t.l1)?;
                iou_sum += val(&t.giou)?;
                let l = t.total(w)?;
                total = Some(match total {
                    Some(acc) => (acc + l)?,
                    None => l,
                });
            }
            let bf = b.max(1) as f64;
            terms.insert("cls".into(), cls_sum / bf);
            terms.insert("l1".into(), l1_sum / bf);
            terms.insert("giou".into(), iou_sum / bf);
            match total {
                Some(t) => (t / bf)?,
                None => losses::zeros_scalar(probs.dtype())?,
            }
        }
    };
    Ok(LossBreakdown {
        total,
        terms,
        warnings,
    })
}

/// Hungarian assignment for one image from detached predictions.
pub fn match_image(
    probs: &Tensor,
    boxes: &Tensor,
    gt: &[[f64; 4]],
    w: &LossWeights,
) -> Result<Assignment> {
    let p = probs.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let bx: Vec<[f64; 4]> = boxes
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?
        .into_iter()
        .map(|r| [r[0], r[1], r[2], r[3]])
        .collect();
    hungarian_match(&p, &bx, gt, w)
}

/// Decoder layers whose query states are supervised, for a decoder of
/// depth `depth`: maps get every state `0..=L`, detection `1..=L`, the
/// rest only the final one.
pub fn supervised_layers(task: TaskType, depth: usize) -> Vec<usize> {
    match task {
        TaskType::Seg | TaskType::Pose => (0..=depth).collect(),
        TaskType::PedDet => (1..=depth).collect(),
        TaskType::Reid | TaskType::Par => vec![depth],
    }
}

/// Sums the task loss over the supervised layers. `outputs[i]` belongs to
/// `supervised_layers(task, depth)[i]`; detection layers are matched
/// independently.
pub fn auxiliary_apply(
    depth: usize,
    outputs: &[UnitOutputs],
    targets: &TaskTargets,
    ctx: LossContext<'_>,
) -> Result<LossBreakdown> {
    let layers = supervised_layers(targets.task_type(), depth);
    if outputs.len() != layers.len() {
        return Err(Error::config(format!(
            "{} layer outputs for {} supervised layers",
            outputs.len(),
            layers.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    let mut terms = BTreeMap::new();
    let mut warnings = Vec::new();
    for o in outputs {
        let l = task_loss(o, targets, ctx)?;
        for (k, v) in l.terms {
            *terms.entry(k).or_insert(0.0) += v;
        }
        warnings.extend(l.warnings);
        total = Some(match total {
            Some(acc) => (acc + l.total)?,
            None => l.total,
        });
    }
    Ok(LossBreakdown {
        total: total.expect("at least one supervised layer"),
        terms,
        warnings,
    })
}

/// `Σ_D w_D · L_D`. Every dataset loss needs a weight.
pub fn aggregate(
    losses: &BTreeMap<String, Tensor>,
    weights: &BTreeMap<String, f64>,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (name, l) in losses {
        let w = weights
            .get(name)
            .ok_or_else(|| Error::config(format!("no loss weight for dataset `{name}`")))?;
        let t = (l * *w)?;
        total = Some(match total {
            Some(acc) => (acc + t)?,
            None => t,
        });
    }
    total.ok_or_else(|| Error::config("no dataset losses to aggregate"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn supervised_layer_sets() {
        assert_eq!(supervised_layers(TaskType::Seg, 1), vec![0, 1]);
        assert_eq!(supervised_layers(TaskType::PedDet, 1), vec![1]);
        assert_eq!(supervised_layers(TaskType::Reid, 9), vec![9]);
        assert_eq!(supervised_layers(TaskType::Pose, 9).len(), 10);
        assert_eq!(supervised_layers(TaskType::PedDet, 9).len(), 9);
    }

    #[test]
    fn aggregate_weighted_sum() {
        let dev = Device::Cpu;
        let mut l = BTreeMap::new();
        l.insert("a".to_string(), Tensor::new(1.0f64, &dev).unwrap());
        l.insert("b".to_string(), Tensor::new(2.0f64, &dev).unwrap());
        let mut w = BTreeMap::new();
        w.insert("a".to_string(), 0.768);
        w.insert("b".to_string(), 0.232);
        let t = aggregate(&l, &w).unwrap().to_scalar::<f64>().unwrap();
        assert!((t - 1.232).abs() < 1e-12);
        w.remove("b");
        assert!(aggregate(&l, &w).is_err());
    }

    #[test]
    fn default_weights_are_valid() {
        LossWeights::default().validate().unwrap();
        let bad = LossWeights {
            lambda_cls: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
