use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::ImageBatch;
use crate::error::{Error, Result};
use crate::objectives::gaussian_heatmap;
use crate::objectives::TaskTargets;
use crate::scenegen::{resize_policy, GroundTruth, ResizeTargets, Sample};
use crate::task::TaskType;

/// Heatmap standard deviation in map pixels.
pub const HEATMAP_SIGMA: f64 = 2.0;

/// Positive ratios are clamped to this range so class weights stay finite.
const RATIO_RANGE: (f64, f64) = (0.01, 0.99);

/// Map pixels per token side: the interpreter upsamples 4x.
pub const MAP_UPSAMPLE: usize = 4;

/// One dataset resized to model input and ready for batching.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub id: String,
    pub task_id: String,
    pub task_type: TaskType,
    pub samples: Vec<Sample>,
    /// Positive ratio per query slot: attribute, class presence or joint
    /// visibility frequency. Empty for re-identification and detection.
    pub ratios: Vec<f64>,
    pub num_queries: usize,
    /// Identity labels remapped to `0..num_identities`.
    pub num_identities: usize,
    identity_map: BTreeMap<usize, usize>,
}

impl PreparedDataset {
    pub fn new(
        id: impl Into<String>,
        task_id: impl Into<String>,
        task_type: TaskType,
        samples: &[Sample],
        targets: &ResizeTargets,
        num_queries: usize,
    ) -> Result<Self> {
        let id = id.into();
        if samples.is_empty() {
            return Err(Error::config(format!("dataset `{id}` has no samples")));
        }
        let mut resized = Vec::with_capacity(samples.len());
        for s in samples {
            if s.task_type() != task_type {
                return Err(Error::config(format!(
                    "dataset `{id}` is {task_type}, sample is {}",
                    s.task_type()
                )));
            }
            resized.push(resize_policy(s, targets).sample);
        }
        let mut counts = vec![0usize; num_queries];
        let mut identity_map = BTreeMap::new();
        for s in &resized {
            match &s.gt {
                GroundTruth::Par { attributes } => {
                    check_len(&id, attributes.len(), num_queries)?;
                    for (c, &a) in counts.iter_mut().zip(attributes) {
                        *c += a as usize;
                    }
                }
                GroundTruth::Pose { joints } => {
                    check_len(&id, joints.len(), num_queries)?;
                    for (c, j) in counts.iter_mut().zip(joints) {
                        *c += j.is_some() as usize;
                    }
                }
                GroundTruth::Seg { classes } => {
                    let mut present = vec![false; num_queries];
                    for p in classes.pixels() {
                        let k = p.0[0] as usize;
                        if k >= num_queries {
                            return Err(Error::config(format!(
                                "dataset `{id}`: class {k} outside {num_queries} queries"
                            )));
                        }
                        present[k] = true;
                    }
                    for (c, p) in counts.iter_mut().zip(present) {
                        *c += p as usize;
                    }
                }
                GroundTruth::Reid { identity } => {
                    let next = identity_map.len();
                    identity_map.entry(*identity).or_insert(next);
                }
                GroundTruth::Det { .. } => {}
            }
        }
        let ratios = if task_type.queries_are_classes() {
            counts
                .iter()
                .map(|&c| (c as f64 / resized.len() as f64).clamp(RATIO_RANGE.0, RATIO_RANGE.1))
                .collect()
        } else {
            Vec::new()
        };
        Ok(PreparedDataset {
            id,
            task_id: task_id.into(),
            task_type,
            num_identities: identity_map.len(),
            samples: resized,
            ratios,
            num_queries,
            identity_map,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Contiguous label of sample `i` (re-identification only).
    pub fn identity(&self, i: usize) -> Option<usize> {
        match &self.samples[i].gt {
            GroundTruth::Reid { identity } => self.identity_map.get(identity).copied(),
            _ => None,
        }
    }

    /// Model input and targets for the samples at `indices`.
    pub fn batch(&self, indices: &[usize], patch: usize, dtype: DType) -> Result<(ImageBatch, TaskTargets)> {
        if indices.is_empty() {
            return Err(Error::config(format!("empty batch for `{}`", self.id)));
        }
        let images: Vec<_> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let batch = ImageBatch::from_images(&images, patch, dtype)?;
        let targets = self.targets(indices, &batch, patch, dtype)?;
        Ok((batch, targets))
    }

    fn targets(&self, indices: &[usize], batch: &ImageBatch, patch: usize, dtype: DType) -> Result<TaskTargets> {
        let b = indices.len();
        let n = self.num_queries;
        let dev = Device::Cpu;
        let (ph, pw) = batch.hw();
        let (mh, mw) = (ph / patch * MAP_UPSAMPLE, pw / patch * MAP_UPSAMPLE);
        // image pixels per map pixel
        let scale = patch as f64 / MAP_UPSAMPLE as f64;
        let valid_map = || -> Result<Tensor> {
            let mut v = Vec::with_capacity(b * mh * mw);
            for &(h, w) in &batch.orig_sizes {
                for i in 0..mh {
                    for j in 0..mw {
                        let inside = ((i as f64 + 0.5) * scale) < h as f64 && ((j as f64 + 0.5) * scale) < w as f64;
                        v.push(inside as u8 as f32);
                    }
                }
            }
            Ok(Tensor::from_vec(v, (b, mh, mw), &dev)?.to_dtype(dtype)?)
        };
        let t = match self.task_type {
            TaskType::Reid => TaskTargets::Reid {
                identities: indices
                    .iter()
                    .map(|&i| self.identity(i).expect("reid sample"))
                    .collect(),
            },
            TaskType::Par => {
                let mut labels = Vec::with_capacity(b * n);
                for &i in indices {
                    let GroundTruth::Par { attributes } = &self.samples[i].gt else { unreachable!() };
                    labels.extend(attributes.iter().map(|&a| a as u8 as f32));
                }
                TaskTargets::Par {
                    labels: Tensor::from_vec(labels, (b, n), &dev)?.to_dtype(dtype)?,
                    ratios: self.ratios.clone(),
                }
            }
            TaskType::Seg => {
                let mut masks = vec![0f32; b * n * mh * mw];
                let mut presence = vec![0f32; b * n];
                for (bi, &i) in indices.iter().enumerate() {
                    let GroundTruth::Seg { classes } = &self.samples[i].gt else { unreachable!() };
                    let (w, h) = classes.dimensions();
                    for y in 0..mh {
                        let sy = ((y as f64 + 0.5) * scale) as u32;
                        if sy >= h {
                            continue;
                        }
                        for x in 0..mw {
                            let sx = ((x as f64 + 0.5) * scale) as u32;
                            if sx >= w {
                                continue;
                            }
                            let k = classes.get_pixel(sx, sy).0[0] as usize;
                            masks[((bi * n + k) * mh + y) * mw + x] = 1.0;
                            presence[bi * n + k] = 1.0;
                        }
                    }
                }
                TaskTargets::Seg {
                    masks: Tensor::from_vec(masks, (b, n, mh, mw), &dev)?.to_dtype(dtype)?,
                    presence: Tensor::from_vec(presence, (b, n), &dev)?.to_dtype(dtype)?,
                    presence_ratios: self.ratios.clone(),
                    valid: Some(valid_map()?),
                }
            }
            TaskType::Pose => {
                let mut heat = vec![0f32; b * n * mh * mw];
                let mut visible = vec![0f32; b * n];
                for (bi, &i) in indices.iter().enumerate() {
                    let GroundTruth::Pose { joints } = &self.samples[i].gt else { unreachable!() };
                    let (h, w) = batch.orig_sizes[bi];
                    for (k, j) in joints.iter().enumerate() {
                        let Some([x, y]) = j else { continue };
                        visible[bi * n + k] = 1.0;
                        // map pixel j covers image pixels centered at (j + 0.5) · scale
                        let cx = x * w as f64 / scale - 0.5;
                        let cy = y * h as f64 / scale - 0.5;
                        let g = gaussian_heatmap(mh, mw, cx, cy, HEATMAP_SIGMA);
                        let off = (bi * n + k) * mh * mw;
                        for (dst, v) in heat[off..off + mh * mw].iter_mut().zip(g) {
                            *dst = v as f32;
                        }
                    }
                }
                TaskTargets::Pose {
                    heatmaps: Tensor::from_vec(heat, (b, n, mh, mw), &dev)?.to_dtype(dtype)?,
                    visible: Tensor::from_vec(visible, (b, n), &dev)?.to_dtype(dtype)?,
                    visibility_ratios: self.ratios.clone(),
                    valid: Some(valid_map()?),
                }
            }
            TaskType::PedDet => TaskTargets::Det {
                boxes: indices
                    .iter()
                    .map(|&i| match &self.samples[i].gt {
                        GroundTruth::Det { boxes } => boxes.clone(),
                        _ => unreachable!(),
                    })
                    .collect(),
            },
        };
        Ok(t)
    }
}

fn check_len(id: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::config(format!(
            "dataset `{id}`: {got} labels per sample, task has {want} queries"
        )));
    }
    Ok(())
}

fn stream(seed: u64, dataset: usize, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((dataset as u64) << 40) ^ tag);
    rng
}

/// Batch indices for optimizer step `step` (1-based), a pure function of
/// its arguments so resumed runs draw the same batches. Samples are visited
/// in seeded per-epoch permutations; re-identification draws
/// identity-balanced `P × K` batches so every anchor has a positive.
pub fn batch_indices(data: &PreparedDataset, batch: usize, seed: u64, dataset: usize, step: u64) -> Vec<usize> {
    if data.task_type == TaskType::Reid {
        let mut rng = stream(seed, dataset, step.wrapping_mul(2) + 1);
        return pk_batch(data, batch, &mut rng);
    }
    let n = data.len() as u64;
    let start = step.saturating_sub(1) * batch as u64;
    let mut perm: Option<(u64, Vec<usize>)> = None;
    (start..start + batch as u64)
        .map(|pos| {
            let epoch = pos / n;
            if perm.as_ref().map(|p| p.0) != Some(epoch) {
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.shuffle(&mut stream(seed, dataset, epoch.wrapping_mul(2)));
                perm = Some((epoch, order));
            }
            perm.as_ref().unwrap().1[(pos % n) as usize]
        })
        .collect()
}

/// `P` identities with `K = min(4, ⌈batch/2⌉)` samples each, drawn with
/// replacement inside an identity when it has fewer than `K`.
fn pk_batch<R: Rng>(data: &PreparedDataset, batch: usize, rng: &mut R) -> Vec<usize> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        if let Some(id) = data.identity(i) {
            by_id.entry(id).or_default().push(i);
        }
    }
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    ids.shuffle(rng);
    let k = batch.div_ceil(2).clamp(1, 4);
    let mut out = Vec::with_capacity(batch);
    let mut p = 0;
    while out.len() < batch {
        let members = &by_id[&ids[p % ids.len()]];
        let mut pool = members.clone();
        pool.shuffle(rng);
        for j in 0..k {
            if out.len() == batch {
                break;
            }
            out.push(pool[j % pool.len()]);
        }
        p += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{synthetic_samples, SceneSpec, JOINT_NAMES, PART_NAMES};

    #[test]
    fn pose_targets_peak_at_joint() {
        let samples = synthetic_samples(&SceneSpec::toy(1), TaskType::Pose, 2, "pose").unwrap();
        let d = PreparedDataset::new("pose", "pose", TaskType::Pose, &samples, &ResizeTargets::toy(), JOINT_NAMES.len())
            .unwrap();
        let (batch, t) = d.batch(&[0, 1], 8, DType::F32).unwrap();
        assert_eq!(batch.hw(), (64, 48));
        let TaskTargets::Pose { heatmaps, visible, .. } = t else { panic!() };
        assert_eq!(heatmaps.dims(), &[2, 8, 32, 24]);
        assert_eq!(visible.sum_all().unwrap().to_scalar::<f32>().unwrap(), 16.0);
        let GroundTruth::Pose { joints } = &d.samples[0].gt else { panic!() };
        let [x, y] = joints[0].unwrap();
        let hm = heatmaps.get(0).unwrap().get(0).unwrap().to_vec2::<f32>().unwrap();
        let (mut bi, mut bj, mut best) = (0, 0, -1.0);
        for (i, row) in hm.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best {
                    (bi, bj, best) = (i, j, v);
                }
            }
        }
        // argmax map pixel center maps back within one map pixel of the joint
        let (px, py) = ((bj as f64 + 0.5) * 2.0 / 48.0, (bi as f64 + 0.5) * 2.0 / 64.0);
        assert!((px - x).abs() <= 2.0 / 48.0 && (py - y).abs() <= 2.0 / 64.0);
    }

    #[test]
    fn seg_targets_are_one_hot() {
        let samples = synthetic_samples(&SceneSpec::toy(2), TaskType::Seg, 3, "seg").unwrap();
        let d = PreparedDataset::new("seg", "seg", TaskType::Seg, &samples, &ResizeTargets::toy(), PART_NAMES.len())
            .unwrap();
        let (_, t) = d.batch(&[0, 1, 2], 8, DType::F32).unwrap();
        let TaskTargets::Seg { masks, valid, .. } = t else { panic!() };
        let per_pixel = masks.sum(1).unwrap();
        let ones = valid.unwrap();
        let diff = (per_pixel - ones).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn reid_batches_hold_positive_pairs() {
        let samples = synthetic_samples(&SceneSpec::toy(3), TaskType::Reid, 16, "reid").unwrap();
        let d = PreparedDataset::new("reid", "reid", TaskType::Reid, &samples, &ResizeTargets::toy(), 1).unwrap();
        let idx = batch_indices(&d, 8, 0, 0, 1);
        assert_eq!(idx.len(), 8);
        let ids: Vec<_> = idx.iter().map(|&i| d.identity(i).unwrap()).collect();
        for id in &ids {
            assert!(ids.iter().filter(|&x| x == id).count() >= 2);
        }
    }

    #[test]
    fn epochs_visit_every_sample() {
        let samples = synthetic_samples(&SceneSpec::toy(4), TaskType::Par, 10, "par").unwrap();
        let d = PreparedDataset::new("par", "par", TaskType::Par, &samples, &ResizeTargets::toy(), 6).unwrap();
        let mut seen: Vec<usize> = (1..=5).flat_map(|t| batch_indices(&d, 4, 7, 0, t)).collect();
        seen.truncate(20);
        for i in 0..10 {
            assert_eq!(seen.iter().filter(|&&x| x == i).count(), 2);
        }
        assert_eq!(batch_indices(&d, 4, 7, 0, 3), batch_indices(&d, 4, 7, 0, 3));
    }
}
