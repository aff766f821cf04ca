use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};

use super::{GroundTruth, Sample};
use crate::task::TaskType;

/// Model input sizes as `(height, width)` per task type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizeTargets {
    pub pose: (u32, u32),
    pub par: (u32, u32),
    pub reid: (u32, u32),
    pub seg: (u32, u32),
    /// Longest side of detection images; aspect ratio is kept.
    pub det_max_side: u32,
}

impl ResizeTargets {
    pub fn paper() -> Self {
        ResizeTargets {
            pose: (256, 192),
            par: (256, 192),
            reid: (256, 128),
            seg: (480, 480),
            det_max_side: 1333,
        }
    }

    pub fn toy() -> Self {
        ResizeTargets {
            pose: (64, 48),
            par: (64, 48),
            reid: (64, 32),
            seg: (64, 48),
            det_max_side: 64,
        }
    }
}

/// Pixel scale applied by a resize: `x' = x · sx`, `y' = y · sy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizeTransform {
    pub sx: f64,
    pub sy: f64,
}

impl ResizeTransform {
    pub fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.sx, p[1] * self.sy]
    }

    pub fn inverse(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] / self.sx, p[1] / self.sy]
    }

    /// Maps a pixel box `[x0, y0, x1, y1]` back to source pixels.
    pub fn inverse_box(&self, b: [f64; 4]) -> [f64; 4] {
        let a = self.inverse([b[0], b[1]]);
        let c = self.inverse([b[2], b[3]]);
        [a[0], a[1], c[0], c[1]]
    }

    pub fn forward_box(&self, b: [f64; 4]) -> [f64; 4] {
        let a = self.forward([b[0], b[1]]);
        let c = self.forward([b[2], b[3]]);
        [a[0], a[1], c[0], c[1]]
    }
}

#[derive(Debug, Clone)]
pub struct Resized {
    pub sample: Sample,
    pub transform: ResizeTransform,
}

/// Output `(width, height)` of a detection image under a longest-side cap.
/// Images already within the cap are left unchanged.
pub fn det_size(w: u32, h: u32, max_side: u32) -> (u32, u32) {
    let longest = w.max(h);
    if longest <= max_side {
        return (w, h);
    }
    let s = max_side as f64 / longest as f64;
    (
        ((w as f64 * s).round() as u32).max(1),
        ((h as f64 * s).round() as u32).max(1),
    )
}

/// Resizes a sample to its task's model input size. Normalized annotations
/// are invariant under a pure rescale; segmentation labels use
/// nearest-neighbor sampling.
pub fn resize_policy(sample: &Sample, targets: &ResizeTargets) -> Resized {
    let (w, h) = sample.image.dimensions();
    let (nw, nh) = match sample.task_type() {
        TaskType::Pose => (targets.pose.1, targets.pose.0),
        TaskType::Par => (targets.par.1, targets.par.0),
        TaskType::Reid => (targets.reid.1, targets.reid.0),
        TaskType::Seg => (targets.seg.1, targets.seg.0),
        TaskType::PedDet => det_size(w, h, targets.det_max_side),
    };
    let image = if (nw, nh) == (w, h) {
        sample.image.clone()
    } else {
        imageops::resize(&sample.image, nw, nh, FilterType::Triangle)
    };
    let gt = match &sample.gt {
        GroundTruth::Seg { classes } => GroundTruth::Seg {
            classes: imageops::resize(classes, nw, nh, FilterType::Nearest),
        },
        other => other.clone(),
    };
    Resized {
        sample: Sample {
            image,
            dataset: sample.dataset.clone(),
            gt,
        },
        transform: ResizeTransform {
            sx: nw as f64 / w as f64,
            sy: nh as f64 / h as f64,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, RgbImage};

    #[test]
    fn det_cap_preserves_aspect() {
        assert_eq!(det_size(2000, 500, 1333), (1333, 333));
        assert_eq!(det_size(800, 600, 1333), (800, 600));
    }

    #[test]
    fn seg_resizes_to_square_with_nearest_labels() {
        let classes = GrayImage::from_fn(100, 60, |x, _| image::Luma([(x / 25) as u8]));
        let s = Sample {
            image: RgbImage::new(100, 60),
            dataset: "seg".into(),
            gt: GroundTruth::Seg { classes },
        };
        let r = resize_policy(&s, &ResizeTargets::paper());
        assert_eq!(r.sample.image.dimensions(), (480, 480));
        let GroundTruth::Seg { classes } = &r.sample.gt else { unreachable!() };
        assert_eq!(classes.dimensions(), (480, 480));
        assert!(classes.pixels().all(|p| p.0[0] < 4));
    }

    #[test]
    fn det_box_round_trip_within_one_pixel() {
        let s = Sample {
            image: RgbImage::new(2000, 500),
            dataset: "det".into(),
            gt: GroundTruth::Det { boxes: vec![] },
        };
        let r = resize_policy(&s, &ResizeTargets::paper());
        assert_eq!(r.sample.image.dimensions(), (1333, 333));
        let b = [120.0, 40.0, 1900.0, 470.0];
        let fwd = r.transform.forward_box(b).map(f64::round);
        let back = r.transform.inverse_box(fwd);
        for (x, y) in b.iter().zip(back) {
            assert!((x - y).abs() <= 1.0);
        }
    }
}
