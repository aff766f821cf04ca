//! Task metrics and dataset evaluation.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::ForwardMode;
use crate::error::{Error, Result};
use crate::nn::sigmoid_f64;
use crate::objectives::{box_corners, TaskTargets};
use crate::scenegen::GroundTruth;
use crate::task::TaskType;
use crate::trainer::{Model, PreparedDataset};

/// Keypoints scoring below this are reported invisible.
pub const POSE_VISIBILITY_THRESHOLD: f64 = 0.05;
/// IoU above which a lower-scored detection is suppressed.
pub const NMS_IOU: f64 = 0.7;
/// IoU for a true positive.
pub const AP_IOU: f64 = 0.5;
/// Detections scoring below this are dropped before NMS.
pub const DET_SCORE_THRESHOLD: f64 = 0.05;
/// Stated in every attribute report.
pub const MA_DEFINITION: &str =
    "mA = mean over attributes of (TPR + TNR) / 2 at threshold 0.5; a rate with an empty denominator is omitted from its attribute's mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsingMetrics {
    pub miou: f64,
    pub pacc: f64,
    /// IoU per class; `None` where the class is absent from both maps.
    pub per_class_iou: Vec<Option<f64>>,
}

/// Confusion-matrix mIoU and pixel accuracy over label maps. Classes absent
/// from both prediction and ground truth are left out of the mean.
pub fn parsing_metrics(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<ParsingMetrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("parsing metrics", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    let mut cm = vec![0usize; num_classes * num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::Domain(format!("label outside {num_classes} classes")));
        }
        cm[g * num_classes + p] += 1;
    }
    let diag: usize = (0..num_classes).map(|k| cm[k * num_classes + k]).sum();
    let per_class_iou: Vec<Option<f64>> = (0..num_classes)
        .map(|k| {
            let tp = cm[k * num_classes + k];
            let row: usize = (0..num_classes).map(|j| cm[k * num_classes + j]).sum();
            let col: usize = (0..num_classes).map(|i| cm[i * num_classes + k]).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    Ok(ParsingMetrics {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        pacc: diag as f64 / pred.len() as f64,
        per_class_iou,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMetrics {
    pub ma: f64,
    pub per_attribute: Vec<f64>,
}

/// Label-mean balanced accuracy at threshold 0.5.
pub fn attribute_metrics(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<AttributeMetrics> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape("attribute metrics", "sample counts differ or are zero"));
    }
    let n = labels[0].len();
    if probs.iter().any(|p| p.len() != n) || labels.iter().any(|l| l.len() != n) {
        return Err(Error::shape("attribute metrics", "ragged attribute vectors"));
    }
    let per_attribute: Vec<f64> = (0..n)
        .map(|a| {
            let (mut tp, mut p, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
            for (pr, l) in probs.iter().zip(labels) {
                let hit = pr[a] >= 0.5;
                if l[a] {
                    p += 1;
                    tp += hit as usize;
                } else {
                    neg += 1;
                    tn += (!hit) as usize;
                }
            }
            let rates: Vec<f64> = [(tp, p), (tn, neg)]
                .into_iter()
                .filter(|&(_, d)| d > 0)
                .map(|(x, d)| x as f64 / d as f64)
                .collect();
            rates.iter().sum::<f64>() / rates.len() as f64
        })
        .collect();
    Ok(AttributeMetrics {
        ma: per_attribute.iter().sum::<f64>() / n.max(1) as f64,
        per_attribute,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Normalized image coordinates.
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub visible: bool,
}

/// Decodes one instance: the argmax of each `σ(Y_m)` map, placed at the
/// center of its map pixel in an image of `(h, w)` pixels whose map pixels
/// span `scale` image pixels; score = peak activation × `y_p`.
pub fn pose_decode(map_logits: &[Vec<Vec<f64>>], y_p: &[f64], image_hw: (usize, usize), scale: f64) -> Result<Vec<Keypoint>> {
    if map_logits.len() != y_p.len() {
        return Err(Error::shape("pose decode", "one global probability per joint is required"));
    }
    let (h, w) = image_hw;
    map_logits
        .iter()
        .zip(y_p)
        .map(|(m, &p)| {
            let (mut bi, mut bj, mut best) = (0, 0, f64::NEG_INFINITY);
            for (i, row) in m.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if v > best {
                        (bi, bj, best) = (i, j, v);
                    }
                }
            }
            if !best.is_finite() {
                return Err(Error::NonFinite { stage: "pose decode", index: 0 });
            }
            let score = sigmoid_f64(best) * p;
            Ok(Keypoint {
                x: (bj as f64 + 0.5) * scale / w as f64,
                y: (bi as f64 + 0.5) * scale / h as f64,
                score,
                visible: score >= POSE_VISIBILITY_THRESHOLD,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub pck: f64,
    pub epe: f64,
    pub joints: usize,
}

/// PCK at `alpha` of each sample's normalizer and mean end-point error, in
/// pixels, over ground-truth-visible joints. Predictions are pixel
/// coordinates; a prediction marked invisible counts as a PCK miss.
pub fn pose_metrics(
    pred: &[Vec<([f64; 2], bool)>],
    gt: &[Vec<Option<[f64; 2]>>],
    normalizers: &[f64],
    alpha: f64,
) -> Result<PoseMetrics> {
    if pred.len() != gt.len() || gt.len() != normalizers.len() {
        return Err(Error::shape("pose metrics", "sample counts differ"));
    }
    let (mut hits, mut count, mut err) = (0usize, 0usize, 0.0);
    for ((p, g), &norm) in pred.iter().zip(gt).zip(normalizers) {
        if p.len() != g.len() {
            return Err(Error::shape("pose metrics", "joint counts differ"));
        }
        for ((pp, vis), gg) in p.iter().zip(g) {
            let Some(gg) = gg else { continue };
            let d = ((pp[0] - gg[0]).powi(2) + (pp[1] - gg[1]).powi(2)).sqrt();
            count += 1;
            err += d;
            hits += (*vis && d <= alpha * norm) as usize;
        }
    }
    if count == 0 {
        return Err(Error::Domain("no visible ground-truth joints".into()));
    }
    Ok(PoseMetrics {
        pck: hits as f64 / count as f64,
        epe: err / count as f64,
        joints: count,
    })
}

fn iou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression on `(cx, cy, h, w)` boxes; returns the
/// kept indices in descending score order.
pub fn nms(boxes: &[[f64; 4]], scores: &[f64], iou: f64) -> Vec<usize> {
    let corners: Vec<[f64; 4]> = boxes.iter().map(box_corners).collect();
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou_corners(&corners[i], &corners[k]) <= iou) {
            keep.push(i);
        }
    }
    keep
}

/// Detections of one image: `(cx, cy, h, w)` boxes and scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageDetections {
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetMetrics {
    pub ap50: f64,
    pub num_gt: usize,
    pub num_detections: usize,
}

/// AP at IoU 0.5 with all-point interpolation, after score thresholding and
/// NMS. Detections are matched greedily in descending score order across
/// all images; each ground truth matches at most once.
pub fn det_metrics(dets: &[ImageDetections], gt: &[Vec<[f64; 4]>]) -> Result<DetMetrics> {
    if dets.len() != gt.len() {
        return Err(Error::shape("det metrics", "image counts differ"));
    }
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (img, d) in dets.iter().enumerate() {
        if d.boxes.len() != d.scores.len() {
            return Err(Error::shape("det metrics", "boxes and scores differ in length"));
        }
        let idx: Vec<usize> = (0..d.boxes.len())
            .filter(|&i| d.scores[i] >= DET_SCORE_THRESHOLD)
            .collect();
        let b: Vec<[f64; 4]> = idx.iter().map(|&i| d.boxes[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| d.scores[i]).collect();
        for k in nms(&b, &s, NMS_IOU) {
            all.push((s[k], img, idx[k]));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let num_gt: usize = gt.iter().map(Vec::len).sum();
    let gt_corners: Vec<Vec<[f64; 4]>> = gt.iter().map(|g| g.iter().map(box_corners).collect()).collect();
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(all.len());
    for &(_, img, i) in &all {
        let c = box_corners(&dets[img].boxes[i]);
        let mut best = (AP_IOU, None);
        for (j, g) in gt_corners[img].iter().enumerate() {
            let v = iou_corners(&c, g);
            if !used[img][j] && v >= best.0 {
                best = (v, Some(j));
            }
        }
        match best.1 {
            Some(j) => {
                used[img][j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    Ok(DetMetrics {
        ap50: average_precision(&tp, num_gt),
        num_gt,
        num_detections: all.len(),
    })
}

/// All-point interpolated AP of a ranked hit list.
pub fn average_precision(ranked_hits: &[bool], num_positives: usize) -> f64 {
    if num_positives == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_hits.len());
    let mut recall = Vec::with_capacity(ranked_hits.len());
    let mut tp = 0usize;
    for (k, &h) in ranked_hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_positives as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidMetrics {
    pub map: f64,
    pub top1: f64,
    /// Queries with at least one gallery match; only these are scored.
    pub queries: usize,
}

fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// Cosine-distance ranking of the gallery for each query. With
/// `same_set`, query `i` and gallery `i` are the same sample and that pair
/// is excluded. Every gallery entry is ranked, so duplicates of a matching
/// identity add positives.
pub fn reid_metrics(
    query: &[Vec<f64>],
    query_ids: &[usize],
    gallery: &[Vec<f64>],
    gallery_ids: &[usize],
    same_set: bool,
) -> Result<ReidMetrics> {
    if query.len() != query_ids.len() || gallery.len() != gallery_ids.len() {
        return Err(Error::shape("reid metrics", "features and identities differ in count"));
    }
    if same_set && query.len() != gallery.len() {
        return Err(Error::shape("reid metrics", "same-set evaluation needs equal sets"));
    }
    let g: Vec<Vec<f64>> = gallery.iter().map(|v| l2_normalize(v)).collect();
    let (mut ap_sum, mut top1, mut scored) = (0.0, 0usize, 0usize);
    for (qi, (q, &qid)) in query.iter().zip(query_ids).enumerate() {
        let q = l2_normalize(q);
        let mut ranked: Vec<(f64, usize)> = g
            .iter()
            .enumerate()
            .filter(|&(gi, _)| !(same_set && gi == qi))
            .map(|(gi, gv)| {
                let cos: f64 = q.iter().zip(gv).map(|(a, b)| a * b).sum();
                (1.0 - cos, gi)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let hits: Vec<bool> = ranked.iter().map(|&(_, gi)| gallery_ids[gi] == qid).collect();
        let positives = hits.iter().filter(|&&h| h).count();
        if positives == 0 {
            continue;
        }
        scored += 1;
        top1 += hits[0] as usize;
        ap_sum += average_precision(&hits, positives);
    }
    if scored == 0 {
        return Err(Error::Domain("no query has a gallery match".into()));
    }
    Ok(ReidMetrics {
        map: ap_sum / scored as f64,
        top1: top1 as f64 / scored as f64,
        queries: scored,
    })
}

/// Metrics of one dataset, with the run configuration echoed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub task_id: String,
    pub task_type: TaskType,
    pub samples: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub per_class: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Range checks: rates in `[0, 1]`, errors non-negative.
    pub fn validate(&self) -> Result<()> {
        for (k, &v) in self.metrics.iter().chain(&self.per_class) {
            let ok = match k.as_str() {
                "epe" => v >= 0.0 && v.is_finite(),
                _ => (0.0..=1.0).contains(&v),
            };
            if !ok {
                return Err(Error::Domain(format!("metric `{k}` = {v} out of range")));
            }
        }
        Ok(())
    }
}

fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Evaluates `model` on every sample of `data` in eval mode.
pub fn evaluate_dataset(model: &Model, data: &PreparedDataset, batch_size: usize) -> Result<EvalReport> {
    let task = model.task(&data.task_id)?.clone();
    let patch = model.config().encoder.patch_size;
    let dtype = model.store().dtype();
    let n = task.num_queries;
    if task.task_type == TaskType::Reid {
        let mut seen = BTreeSet::new();
        let repeated = (0..data.len()).filter_map(|i| data.identity(i)).any(|id| !seen.insert(id));
        if !repeated {
            return Err(Error::config(format!(
                "dataset `{}`: re-identification evaluation needs an identity with at least two samples",
                data.id
            )));
        }
    }
    let mut metrics = BTreeMap::new();
    let mut per_class = BTreeMap::new();
    let mut notes = Vec::new();

    let mut seg_pred = Vec::new();
    let mut seg_gt = Vec::new();
    let mut attr_probs = Vec::new();
    let mut attr_labels = Vec::new();
    let mut pose_pred = Vec::new();
    let mut pose_gt = Vec::new();
    let mut pose_norm = Vec::new();
    let mut dets = Vec::new();
    let mut det_gt = Vec::new();
    let mut feats = Vec::new();
    let mut ids = Vec::new();

    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (images, targets) = data.batch(chunk, patch, dtype)?;
        let out = model.forward(&data.task_id, &images, &ForwardMode::eval(), None)?;
        let u = &out.units[0];
        let b = chunk.len();
        match (&task.task_type, &targets) {
            (TaskType::Seg, TaskTargets::Seg { masks, valid, .. }) => {
                let ym = u.y_m.as_ref().expect("map unit");
                let (_, _, mh, mw) = ym.dims4()?;
                let pred = ym.argmax(1)?.to_dtype(DType::U32)?.flatten_all()?.to_vec1::<u32>()?;
                let gt = masks.argmax(1)?.to_dtype(DType::U32)?.flatten_all()?.to_vec1::<u32>()?;
                let val = to_f64_vec(valid.as_ref().expect("seg valid"))?;
                for i in 0..b * mh * mw {
                    if val[i] > 0.5 {
                        seg_pred.push(pred[i] as usize);
                        seg_gt.push(gt[i] as usize);
                    }
                }
            }
            (TaskType::Par, TaskTargets::Par { labels, .. }) => {
                let p = to_f64_vec(u.y_p.as_ref().expect("global unit"))?;
                let l = to_f64_vec(labels)?;
                for i in 0..b {
                    attr_probs.push(p[i * n..(i + 1) * n].to_vec());
                    attr_labels.push(l[i * n..(i + 1) * n].iter().map(|&x| x > 0.5).collect());
                }
            }
            (TaskType::Pose, _) => {
                let ym = u.y_m.as_ref().expect("map unit");
                let (_, k, mh, mw) = ym.dims4()?;
                let maps = to_f64_vec(ym)?;
                let p = to_f64_vec(u.y_p.as_ref().expect("global unit"))?;
                let scale = patch as f64 / 4.0;
                for (bi, &si) in chunk.iter().enumerate() {
                    let (h, w) = images.orig_sizes[bi];
                    let m: Vec<Vec<Vec<f64>>> = (0..k)
                        .map(|kk| {
                            (0..mh)
                                .map(|i| {
                                    let off = ((bi * k + kk) * mh + i) * mw;
                                    maps[off..off + mw].to_vec()
                                })
                                .collect()
                        })
                        .collect();
                    let kps = pose_decode(&m, &p[bi * k..(bi + 1) * k], (h, w), scale)?;
                    pose_pred.push(kps.iter().map(|kp| ([kp.x * w as f64, kp.y * h as f64], kp.visible)).collect());
                    let GroundTruth::Pose { joints } = &data.samples[si].gt else { unreachable!() };
                    pose_gt.push(joints.iter().map(|j| j.map(|[x, y]| [x * w as f64, y * h as f64])).collect());
                    pose_norm.push(h.max(w) as f64);
                }
            }
            (TaskType::PedDet, TaskTargets::Det { boxes }) => {
                let bx = u.y_bbox.as_ref().expect("bbox unit");
                let bxv = to_f64_vec(bx)?;
                let p = to_f64_vec(u.y_p.as_ref().expect("global unit"))?;
                for (bi, g) in boxes.iter().enumerate() {
                    let nq = bx.dim(1)?;
                    dets.push(ImageDetections {
                        boxes: (0..nq)
                            .map(|q| {
                                let o = (bi * nq + q) * 4;
                                [bxv[o], bxv[o + 1], bxv[o + 2], bxv[o + 3]]
                            })
                            .collect(),
                        scores: p[bi * nq..(bi + 1) * nq].to_vec(),
                    });
                    det_gt.push(g.clone());
                }
            }
            (TaskType::Reid, TaskTargets::Reid { identities }) => {
                let f = u.y_f.as_ref().expect("feature unit").flatten_from(1)?;
                let fv = to_f64_vec(&f)?;
                let d = f.dim(1)?;
                for i in 0..b {
                    feats.push(fv[i * d..(i + 1) * d].to_vec());
                }
                ids.extend(identities);
            }
            _ => return Err(Error::config("targets do not match the task type")),
        }
    }

    match task.task_type {
        TaskType::Seg => {
            let m = parsing_metrics(&seg_pred, &seg_gt, n)?;
            metrics.insert("miou".into(), m.miou);
            metrics.insert("pacc".into(), m.pacc);
            for (k, v) in m.per_class_iou.iter().enumerate() {
                if let Some(v) = v {
                    per_class.insert(class_name(&task.class_names, k), *v);
                }
            }
            notes.push("evaluated at local-map resolution against nearest-sampled labels".into());
        }
        TaskType::Par => {
            let m = attribute_metrics(&attr_probs, &attr_labels)?;
            metrics.insert("ma".into(), m.ma);
            for (k, v) in m.per_attribute.iter().enumerate() {
                per_class.insert(class_name(&task.class_names, k), *v);
            }
            notes.push(MA_DEFINITION.into());
        }
        TaskType::Pose => {
            let m = pose_metrics(&pose_pred, &pose_gt, &pose_norm, 0.1)?;
            metrics.insert("pck@0.1".into(), m.pck);
            metrics.insert("epe".into(), m.epe);
            notes.push("PCK normalized by the longest side of the model input".into());
        }
        TaskType::PedDet => {
            let m = det_metrics(&dets, &det_gt)?;
            metrics.insert("ap50".into(), m.ap50);
        }
        TaskType::Reid => {
            let m = reid_metrics(&feats, &ids, &feats, &ids, true)?;
            metrics.insert("map".into(), m.map);
            metrics.insert("top1".into(), m.top1);
            notes.push("query = gallery with self-matches excluded".into());
        }
    }
    let report = EvalReport {
        dataset: data.id.clone(),
        task_id: data.task_id.clone(),
        task_type: task.task_type,
        samples: data.len(),
        metrics,
        per_class,
        notes,
        config: serde_json::Value::Null,
    };
    report.validate()?;
    Ok(report)
}

fn class_name(names: &[String], k: usize) -> String {
    names.get(k).cloned().unwrap_or_else(|| format!("class{k}"))
}
