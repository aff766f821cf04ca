//! Differentiable task losses. Probabilities entering a logarithm are
//! clamped to `[EPS, 1 − EPS]`.

use candle_core::{DType, Device, Tensor, D};

use super::LossWeights;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Linear};

pub const EPS: f64 = 1e-7;

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(EPS, 1.0 - EPS)?)
}

fn pow(x: &Tensor, e: f64) -> Result<Tensor> {
    if e == 2.0 {
        Ok(x.sqr()?)
    } else if e == 1.0 {
        Ok(x.clone())
    } else if e == 0.0 {
        Ok(x.ones_like()?)
    } else {
        Ok(x.powf(e)?)
    }
}

fn const_like(values: Vec<f64>, shape: &[usize], like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())?)
}

fn scalar_value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Attribute weight `y e^{1−γ} + (1 − y) e^{γ}`.
pub fn par_weight(y: f64, gamma: f64) -> f64 {
    y * (1.0 - gamma).exp() + (1.0 - y) * gamma.exp()
}

/// Weighted binary cross-entropy, negated so that lower is better:
/// `−Σ_n w_n (y_n log p_n + (1 − y_n) log(1 − p_n))` per sample, averaged
/// over the leading axes. `probs` and `labels` hold `N` values per sample
/// (trailing singleton allowed); `ratios` are the positive ratios `γ`.
pub fn par_loss(probs: &Tensor, labels: &Tensor, ratios: &[f64]) -> Result<Tensor> {
    let n = ratios.len();
    if n == 0 || probs.elem_count() % n != 0 || labels.elem_count() != probs.elem_count() {
        return Err(Error::shape(
            "par loss",
            format!("probs {:?}, labels {:?}, {n} ratios", probs.dims(), labels.dims()),
        ));
    }
    if let Some(g) = ratios.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        return Err(Error::Domain(format!("positive ratio {g} outside (0, 1)")));
    }
    let rows = probs.elem_count() / n;
    let p = clamp_prob(&probs.reshape((rows, n))?)?;
    let y = labels.reshape((rows, n))?.to_dtype(p.dtype())?;
    let yv = y.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let w: Vec<f64> = yv
        .iter()
        .enumerate()
        .map(|(i, &yi)| par_weight(yi, ratios[i % n]))
        .collect();
    let w = const_like(w, &[rows, n], &p)?;
    let ll = ((&y * p.log()?)? + ((1.0 - &y)? * (1.0 - &p)?.log()?)?)?;
    Ok(((ll * w)?.sum_all()? * (-1.0 / rows as f64))?)
}

/// Per-pixel validity broadcast to `[B, 1, H, W]`, or ones.
fn pixel_weights(valid: Option<&Tensor>, like: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = like.dims4()?;
    match valid {
        Some(v) => {
            if v.dims() != [b, h, w] {
                return Err(Error::shape(
                    "pixel mask",
                    format!("{:?} vs maps {:?}", v.dims(), like.dims()),
                ));
            }
            Ok(v.to_dtype(like.dtype())?.reshape((b, 1, h, w))?)
        }
        None => Ok(Tensor::ones((b, 1, h, w), like.dtype(), like.device())?),
    }
}

fn check_maps(logits: &Tensor, target: &Tensor, what: &str) -> Result<()> {
    if logits.rank() != 4 || logits.dims() != target.dims() {
        return Err(Error::shape(
            what,
            format!("logits {:?} vs target {:?}", logits.dims(), target.dims()),
        ));
    }
    Ok(())
}

/// Binary cross-entropy of `σ(logits)` against `target` `[B, N, H, W]`,
/// averaged over valid pixels and queries.
pub fn mask_bce_loss(logits: &Tensor, target: &Tensor, valid: Option<&Tensor>) -> Result<Tensor> {
    check_maps(logits, target, "mask bce")?;
    let n = logits.dim(1)?;
    let pw = pixel_weights(valid, logits)?;
    let p = clamp_prob(&sigmoid(logits)?)?;
    let t = target.to_dtype(p.dtype())?;
    let ll = ((&t * p.log()?)? + ((1.0 - &t)? * (1.0 - &p)?.log()?)?)?;
    let denom = scalar_value(&pw.sum_all()?)? * n as f64;
    if denom == 0.0 {
        return Err(Error::shape("mask bce", "no valid pixels"));
    }
    Ok((ll.broadcast_mul(&pw)?.sum_all()? * (-1.0 / denom))?)
}

/// `1 − (2Σpt + s) / (Σp + Σt + s)` per map, `p = σ(logits)`, averaged over
/// batch and queries.
pub fn dice_loss(
    logits: &Tensor,
    target: &Tensor,
    valid: Option<&Tensor>,
    smooth: f64,
) -> Result<Tensor> {
    check_maps(logits, target, "dice")?;
    let (b, n, _, _) = logits.dims4()?;
    let pw = pixel_weights(valid, logits)?;
    let p = sigmoid(logits)?.broadcast_mul(&pw)?;
    let t = target.to_dtype(p.dtype())?.broadcast_mul(&pw)?;
    let inter = (&p * &t)?.sum((2, 3))?;
    let num = ((inter * 2.0)? + smooth)?;
    let den = ((p.sum((2, 3))? + t.sum((2, 3))?)? + smooth)?;
    let per = (1.0 - (num / den)?)?;
    Ok((per.sum_all()? / (b * n) as f64)?)
}

/// Mean squared error between `σ(logits)` and heatmaps over visible joints
/// and valid pixels. Zero when nothing is visible.
pub fn heatmap_mse(
    logits: &Tensor,
    heatmaps: &Tensor,
    visible: &Tensor,
    valid: Option<&Tensor>,
) -> Result<Tensor> {
    check_maps(logits, heatmaps, "heatmap mse")?;
    let (b, k, _, _) = logits.dims4()?;
    if visible.dims() != [b, k] {
        return Err(Error::shape("heatmap mse", "visibility must be [B, K]"));
    }
    let pw = pixel_weights(valid, logits)?;
    let vis = visible.to_dtype(logits.dtype())?.reshape((b, k, 1, 1))?;
    let per_img_pixels = pw.sum((1, 2, 3))?; // [B]
    let per_img_vis = vis.sum((1, 2, 3))?;
    let denom = scalar_value(&(per_img_pixels * per_img_vis)?.sum_all()?)?;
    let diff = (sigmoid(logits)? - heatmaps.to_dtype(logits.dtype())?)?;
    let sq = diff.sqr()?.broadcast_mul(&vis)?.broadcast_mul(&pw)?;
    if denom == 0.0 {
        return Ok((sq.sum_all()? * 0.0)?);
    }
    Ok((sq.sum_all()? / denom)?)
}

/// Summed focal loss `−α y (1−p)^γ log p − (1−α)(1−y) p^γ log(1−p)`.
pub fn focal_loss(probs: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    if probs.dims() != targets.dims() {
        return Err(Error::shape("focal", "probability and target shapes differ"));
    }
    let p = clamp_prob(probs)?;
    let y = targets.to_dtype(p.dtype())?;
    let one_m = (1.0 - &p)?;
    let pos = ((&y * pow(&one_m, gamma)?)? * p.log()?)?;
    let neg = (((1.0 - &y)? * pow(&p, gamma)?)? * one_m.log()?)?;
    let l = ((pos * alpha)? + (neg * (1.0 - alpha))?)?;
    Ok((l.sum_all()? * -1.0)?)
}

/// Classification cost of matching a prediction with score `p`: focal loss
/// as positive minus focal loss as negative.
pub fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    let pos = alpha * (1.0 - p).powf(gamma) * -(p.ln());
    let neg = (1.0 - alpha) * p.powf(gamma) * -((1.0 - p).ln());
    pos - neg
}

/// Corners `(x1, y1, x2, y2)` of a `(cx, cy, h, w)` box.
pub fn box_corners(b: &[f64; 4]) -> [f64; 4] {
    let [cx, cy, h, w] = *b;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Generalized IoU of two `(cx, cy, h, w)` boxes. A zero-area union gives
/// IoU 0; a zero-area enclosure contributes no penalty.
pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let [ax1, ay1, ax2, ay2] = box_corners(a);
    let [bx1, by1, bx2, by2] = box_corners(b);
    let area = |x1: f64, y1: f64, x2: f64, y2: f64| (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
    let inter = area(ax1.max(bx1), ay1.max(by1), ax2.min(bx2), ay2.min(by2));
    let union = area(ax1, ay1, ax2, ay2) + area(bx1, by1, bx2, by2) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let enclosure = area(ax1.min(bx1), ay1.min(by1), ax2.max(bx2), ay2.max(by2));
    if enclosure > 0.0 {
        iou - (enclosure - union) / enclosure
    } else {
        iou
    }
}

/// Pairwise GIoU of `[M, 4]` box tensors, returning `[M]`.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let corners = |t: &Tensor| -> Result<[Tensor; 4]> {
        let c = t.narrow(D::Minus1, 0, 1)?;
        let cy = t.narrow(D::Minus1, 1, 1)?;
        let h = t.narrow(D::Minus1, 2, 1)?;
        let w = t.narrow(D::Minus1, 3, 1)?;
        let hw = (&w * 0.5)?;
        let hh = (&h * 0.5)?;
        Ok([(&c - &hw)?, (&cy - &hh)?, (&c + &hw)?, (&cy + &hh)?])
    };
    let [ax1, ay1, ax2, ay2] = corners(a)?;
    let [bx1, by1, bx2, by2] = corners(b)?;
    let area = |x1: &Tensor, y1: &Tensor, x2: &Tensor, y2: &Tensor| -> Result<Tensor> {
        Ok(((x2 - x1)?.relu()? * (y2 - y1)?.relu()?)?)
    };
    let inter = area(
        &ax1.maximum(&bx1)?,
        &ay1.maximum(&by1)?,
        &ax2.minimum(&bx2)?,
        &ay2.minimum(&by2)?,
    )?;
    let union = ((area(&ax1, &ay1, &ax2, &ay2)? + area(&bx1, &by1, &bx2, &by2)?)? - &inter)?;
    let iou = (&inter / (&union + EPS)?)?;
    let enc = area(
        &ax1.minimum(&bx1)?,
        &ay1.minimum(&by1)?,
        &ax2.maximum(&bx2)?,
        &ay2.maximum(&by2)?,
    )?;
    let penalty = ((&enc - &union)? / (&enc + EPS)?)?;
    Ok((iou - penalty)?.squeeze(D::Minus1)?)
}

/// Detection loss breakdown for one image.
#[derive(Debug, Clone)]
pub struct DetTerms {
    pub cls: Tensor,
    pub l1: Tensor,
    pub giou: Tensor,
}

impl DetTerms {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        Ok((((&self.cls * w.lambda_cls)? + (&self.l1 * w.lambda_l1)?)? + (&self.giou * w.lambda_iou)?)?)
    }
}

/// Unweighted detection terms for one image, each normalized by
/// `max(#GT, 1)`. `probs`: `[N]` or `[N, 1]`, `boxes`: `[N, 4]`.
pub fn det_terms(
    probs: &Tensor,
    boxes: &Tensor,
    gt: &[[f64; 4]],
    assignment: &super::Assignment,
    w: &LossWeights,
) -> Result<DetTerms> {
    let n = boxes.dim(0)?;
    let probs = probs.reshape(n)?;
    let mut target = vec![0.0; n];
    for &(g, p) in &assignment.pairs {
        if g >= gt.len() || p >= n {
            return Err(Error::Matching(format!("assignment pair ({g}, {p}) out of range")));
        }
        target[p] = 1.0;
    }
    let norm = gt.len().max(1) as f64;
    let target = const_like(target, &[n], &probs)?;
    let cls = (focal_loss(&probs, &target, w.focal_alpha, w.focal_gamma)? / norm)?;
    if assignment.pairs.is_empty() {
        let zero = (boxes.sum_all()? * 0.0)?;
        return Ok(DetTerms {
            cls,
            l1: zero.clone(),
            giou: zero,
        });
    }
    let pred_idx: Vec<u32> = assignment.pairs.iter().map(|p| p.1 as u32).collect();
    let m = pred_idx.len();
    let idx = Tensor::from_vec(pred_idx, m, boxes.device())?;
    let pred = boxes.index_select(&idx, 0)?;
    let gt_flat: Vec<f64> = assignment.pairs.iter().flat_map(|p| gt[p.0]).collect();
    let gtt = const_like(gt_flat, &[m, 4], boxes)?;
    let l1 = ((&pred - &gtt)?.abs()?.sum_all()? / norm)?;
    let g = ((1.0 - giou_tensor(&pred, &gtt)?)?.sum_all()? / norm)?;
    Ok(DetTerms { cls, l1, giou: g })
}

/// Re-identification loss breakdown.
#[derive(Debug, Clone)]
pub struct ReidTerms {
    pub id: Tensor,
    pub triplet: Tensor,
    /// False when no anchor in the batch had both a positive and a negative.
    pub triplet_valid: bool,
}

/// Softmax cross-entropy of `classifier(concat(Y_f))` plus the batch-hard
/// triplet loss on the concatenated features `[B, N·C]`.
pub fn reid_terms(
    features: &Tensor,
    identities: &[usize],
    classifier: &Linear,
    num_ids: usize,
    margin: f64,
) -> Result<ReidTerms> {
    let b = features.dim(0)?;
    if identities.len() != b {
        return Err(Error::shape("reid", format!("{b} samples, {} labels", identities.len())));
    }
    if let Some(&id) = identities.iter().find(|&&i| i >= num_ids) {
        return Err(Error::Domain(format!("identity {id} outside classifier range {num_ids}")));
    }
    let flat = features.flatten_from(1)?;
    let logits = classifier.forward(&flat)?;
    let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
    let mut onehot = vec![0.0; b * num_ids];
    for (i, &id) in identities.iter().enumerate() {
        onehot[i * num_ids + id] = 1.0;
    }
    let onehot = const_like(onehot, &[b, num_ids], &logp)?;
    let id = ((logp * onehot)?.sum_all()? * (-1.0 / b as f64))?;

    // pairwise Euclidean distances, stabilized at zero
    let sq = flat.sqr()?.sum_keepdim(1)?;
    let gram = flat.matmul(&flat.t()?)?;
    let d2 = (sq.broadcast_add(&sq.t()?)? - (gram * 2.0)?)?.relu()?;
    let dist = (d2 + 1e-12)?.sqrt()?;
    let mut pos = vec![0.0; b * b];
    let mut neg = vec![0.0; b * b];
    let mut anchors = Vec::new();
    for i in 0..b {
        let mut has = (false, false);
        for j in 0..b {
            if i == j {
                continue;
            }
            if identities[i] == identities[j] {
                pos[i * b + j] = 1.0;
                has.0 = true;
            } else {
                neg[i * b + j] = 1.0;
                has.1 = true;
            }
        }
        if has.0 && has.1 {
            anchors.push(i as u32);
        }
    }
    if anchors.is_empty() {
        return Ok(ReidTerms {
            id,
            triplet: (dist.sum_all()? * 0.0)?,
            triplet_valid: false,
        });
    }
    let pos = const_like(pos, &[b, b], &dist)?;
    let neg_fill = const_like(neg.iter().map(|v| (1.0 - v) * 1e9).collect(), &[b, b], &dist)?;
    let hardest_pos = (&dist * pos)?.max(1)?;
    let hardest_neg = (&dist + neg_fill)?.min(1)?;
    let idx = Tensor::from_vec(anchors.clone(), anchors.len(), dist.device())?;
    let hinge = ((hardest_pos - hardest_neg)? + margin)?.relu()?.index_select(&idx, 0)?;
    Ok(ReidTerms {
        id,
        triplet: hinge.mean_all()?,
        triplet_valid: true,
    })
}

/// Unit-peak Gaussian heatmap of a joint at `(x, y)` map pixels.
pub fn gaussian_heatmap(h: usize, w: usize, x: f64, y: f64, sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let d2 = (j as f64 - x).powi(2) + (i as f64 - y).powi(2);
            out.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    out
}

pub(crate) fn zeros_scalar(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &Device::Cpu)?)
}
