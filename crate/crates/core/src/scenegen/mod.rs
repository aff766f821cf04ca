//! Deterministic synthetic scenes of stick figures with consistent keypoint,
//! part-mask, box, attribute and identity annotations, plus loaders and
//! writers for common annotation layouts.

mod formats;
mod render;
mod resize;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskType;

pub use formats::{
    load_attribute_table, load_box_file, load_dataset, load_identity_dir, load_keypoint_file,
    load_mask_dir, write_dataset, DataFormat, DatasetEntry, DatasetManifest, LoadedDataset,
};
pub use render::Canvas;
pub use resize::{resize_policy, ResizeTargets, ResizeTransform, Resized};

pub const JOINT_NAMES: [&str; 8] = [
    "head", "neck", "l_hand", "r_hand", "l_knee", "r_knee", "l_foot", "r_foot",
];
/// Index 0 is background.
pub const PART_NAMES: [&str; 6] = ["background", "head", "torso", "arms", "legs", "accessory"];
pub const ATTRIBUTE_NAMES: [&str; 6] = [
    "hat",
    "bag",
    "skirt",
    "long_hair",
    "upper_bright",
    "lower_dark",
];

const HEAD: u8 = 1;
const TORSO: u8 = 2;
const ARMS: u8 = 3;
const LEGS: u8 = 4;
const ACCESSORY: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: u32,
    pub width: u32,
    pub min_figures: usize,
    pub max_figures: usize,
    pub identities: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn toy(seed: u64) -> Self {
        SceneSpec {
            height: 128,
            width: 192,
            min_figures: 1,
            max_figures: 3,
            identities: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_figures == 0 || self.min_figures > self.max_figures {
            return Err(Error::config("figure count range must satisfy 1 <= min <= max"));
        }
        if self.identities == 0 {
            return Err(Error::config("identity pool must be non-empty"));
        }
        if self.height < 32 || (self.width as usize) < 20 * self.max_figures {
            return Err(Error::config(format!(
                "canvas {}x{} too small for {} figures",
                self.width, self.height, self.max_figures
            )));
        }
        Ok(())
    }
}

/// Appearance fixed per identity; attribute bits follow from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    pub hat: bool,
    pub bag: bool,
    pub skirt: bool,
    pub long_hair: bool,
    pub upper_bright: bool,
    pub lower_dark: bool,
    pub shirt: [u8; 3],
    pub pants: [u8; 3],
    pub skin: [u8; 3],
    pub hair: [u8; 3],
    pub hat_color: [u8; 3],
    pub bag_color: [u8; 3],
}

impl Style {
    pub fn attributes(&self) -> Vec<bool> {
        vec![
            self.hat,
            self.bag,
            self.skirt,
            self.long_hair,
            self.upper_bright,
            self.lower_dark,
        ]
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn color_in<R: Rng>(rng: &mut R, lo: u8, hi: u8) -> [u8; 3] {
    [
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    ]
}

pub fn identity_style(seed: u64, identity: usize) -> Style {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x1d_e471_7e57, identity as u64));
    let upper_bright = rng.random_bool(0.5);
    let lower_dark = rng.random_bool(0.5);
    Style {
        hat: rng.random_bool(0.5),
        bag: rng.random_bool(0.5),
        skirt: rng.random_bool(0.5),
        long_hair: rng.random_bool(0.5),
        upper_bright,
        lower_dark,
        shirt: if upper_bright {
            color_in(&mut rng, 170, 255)
        } else {
            color_in(&mut rng, 10, 80)
        },
        pants: if lower_dark {
            color_in(&mut rng, 0, 50)
        } else {
            color_in(&mut rng, 130, 220)
        },
        skin: [
            rng.random_range(180..=240),
            rng.random_range(130..=180),
            rng.random_range(100..=140),
        ],
        hair: color_in(&mut rng, 20, 90),
        hat_color: [rng.random_range(150..=255), 40, rng.random_range(0..=80)],
        bag_color: [40, rng.random_range(100..=200), rng.random_range(150..=255)],
    }
}

/// One rendered figure in scene pixel coordinates.
#[derive(Debug, Clone)]
pub struct Figure {
    pub identity: usize,
    pub style: Style,
    /// Tight box `[x0, y0, x1, y1)` over the figure's pixels.
    pub bbox: [u32; 4],
    /// Joint centers `(x, y)` in pixels, ordered as [`JOINT_NAMES`].
    pub joints: [[f64; 2]; 8],
    /// Horizontal extent of the figure's slot.
    pub slot: [u32; 2],
}

/// A rendered scene with ground truth for every task type.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub index: usize,
    pub image: RgbImage,
    /// Part class per pixel, values index [`PART_NAMES`].
    pub classes: GrayImage,
    /// `figure index + 1` per pixel, 0 for background.
    pub owner: GrayImage,
    pub figures: Vec<Figure>,
}

/// Model-facing ground truth for one sample. Coordinates are normalized to
/// the sample image.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Reid { identity: usize },
    Par { attributes: Vec<bool> },
    /// Contiguous class id per pixel, same size as the image.
    Seg { classes: GrayImage },
    /// `(x, y)` per joint, `None` when not visible.
    Pose { joints: Vec<Option<[f64; 2]>> },
    /// `(cx, cy, h, w)` per person.
    Det { boxes: Vec<[f64; 4]> },
}

impl GroundTruth {
    pub fn task_type(&self) -> TaskType {
        match self {
            GroundTruth::Reid { .. } => TaskType::Reid,
            GroundTruth::Par { .. } => TaskType::Par,
            GroundTruth::Seg { .. } => TaskType::Seg,
            GroundTruth::Pose { .. } => TaskType::Pose,
            GroundTruth::Det { .. } => TaskType::PedDet,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub dataset: String,
    pub gt: GroundTruth,
}

impl Sample {
    pub fn task_type(&self) -> TaskType {
        self.gt.task_type()
    }
}

pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<SceneBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index as u64));
    let n = rng.random_range(spec.min_figures..=spec.max_figures);
    let (w, h) = (spec.width, spec.height);
    let bg = color_in(&mut rng, 150, 235);
    let mut canvas = Canvas::new(w, h, bg);
    for p in canvas.rgb.pixels_mut() {
        for c in p.0.iter_mut() {
            *c = c.saturating_add_signed(rng.random_range(-6i8..=6));
        }
    }
    let slot_w = w as f64 / n as f64;
    let mut figures = Vec::with_capacity(n);
    for j in 0..n {
        let identity = (index * spec.max_figures + j) % spec.identities;
        let style = identity_style(spec.seed, identity);
        let slot = [(j as f64 * slot_w).round() as u32, ((j + 1) as f64 * slot_w).round() as u32];
        let joints = draw_figure(&mut canvas, &mut rng, &style, slot, h, (j + 1) as u8);
        figures.push(Figure {
            identity,
            style,
            bbox: [0; 4],
            joints,
            slot,
        });
    }
    for (j, f) in figures.iter_mut().enumerate() {
        f.bbox = owner_bbox(&canvas.owner, (j + 1) as u8)
            .ok_or_else(|| Error::config("canvas too small to render a figure"))?;
    }
    Ok(SceneBundle {
        index,
        image: canvas.rgb,
        classes: canvas.class,
        owner: canvas.owner,
        figures,
    })
}

fn owner_bbox(owner: &GrayImage, id: u8) -> Option<[u32; 4]> {
    let mut b = [u32::MAX, u32::MAX, 0, 0];
    let mut any = false;
    for (x, y, p) in owner.enumerate_pixels() {
        if p.0[0] == id {
            any = true;
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x + 1);
            b[3] = b[3].max(y + 1);
        }
    }
    any.then_some(b)
}

fn draw_figure<R: Rng>(
    c: &mut Canvas,
    rng: &mut R,
    s: &Style,
    slot: [u32; 2],
    canvas_h: u32,
    owner: u8,
) -> [[f64; 2]; 8] {
    let slot_w = (slot[1] - slot[0]) as f64;
    let max_h = canvas_h as f64 - 4.0;
    let u = (max_h * rng.random_range(0.7..0.95)).min(slot_w / 0.7);
    let cx = (slot[0] + slot[1]) as f64 / 2.0 + rng.random_range(-0.05..0.05) * slot_w;
    let top = rng.random_range(2.0..(canvas_h as f64 - u).max(2.5));
    let t = (0.04 * u).max(1.5);
    let r = 0.085 * u;
    let head = [cx, top + 0.08 * u + r];
    let neck = [cx, head[1] + 1.3 * r];
    let hip = [cx, neck[1] + 0.3 * u];
    let deg = |d: f64| d.to_radians();
    let limb = |from: [f64; 2], len: f64, ang: f64, side: f64| {
        [from[0] + side * len * ang.sin(), from[1] + len * ang.cos()]
    };
    let arm = 0.3 * u;
    let l_hand = limb(neck, arm, deg(rng.random_range(25.0..110.0)), -1.0);
    let r_hand = limb(neck, arm, deg(rng.random_range(25.0..110.0)), 1.0);
    let l_knee = limb(hip, 0.2 * u, deg(rng.random_range(4.0..25.0)), -1.0);
    let r_knee = limb(hip, 0.2 * u, deg(rng.random_range(4.0..25.0)), 1.0);
    let l_foot = limb(l_knee, 0.2 * u, deg(rng.random_range(-5.0..15.0)), -1.0);
    let r_foot = limb(r_knee, 0.2 * u, deg(rng.random_range(-5.0..15.0)), 1.0);

    // draw order keeps every joint on its own part
    for (a, b) in [(hip, l_knee), (l_knee, l_foot), (hip, r_knee), (r_knee, r_foot)] {
        c.capsule(a, b, t, s.pants, LEGS, owner);
    }
    if s.skirt {
        c.rect(
            [hip[0] - 0.1 * u, hip[1] - 0.02 * u, hip[0] + 0.1 * u, hip[1] + 0.12 * u],
            s.pants,
            LEGS,
            owner,
        );
    }
    if s.bag {
        let x0 = hip[0] + 1.8 * t + 0.02 * u;
        c.rect(
            [x0, hip[1] - 0.12 * u, x0 + 0.12 * u, hip[1] + 0.02 * u],
            s.bag_color,
            ACCESSORY,
            owner,
        );
    }
    c.capsule(neck, l_hand, t, s.skin, ARMS, owner);
    c.capsule(neck, r_hand, t, s.skin, ARMS, owner);
    if s.long_hair {
        c.rect(
            [head[0] - 1.15 * r, head[1] - 0.2 * r, head[0] + 1.15 * r, neck[1] + 0.04 * u],
            s.hair,
            HEAD,
            owner,
        );
    }
    c.capsule(neck, hip, 1.8 * t, s.shirt, TORSO, owner);
    c.disk(head, r, s.skin, HEAD, owner);
    if s.hat {
        c.rect(
            [head[0] - 1.25 * r, head[1] - r - 0.08 * u, head[0] + 1.25 * r, head[1] - 0.55 * r],
            s.hat_color,
            ACCESSORY,
            owner,
        );
    }
    [head, neck, l_hand, r_hand, l_knee, r_knee, l_foot, r_foot]
}

impl SceneBundle {
    /// Crop region around figure `j`: its box grown by 10% per side,
    /// confined to its slot and the canvas.
    pub fn crop_region(&self, j: usize) -> [u32; 4] {
        let f = &self.figures[j];
        let [x0, y0, x1, y1] = f.bbox;
        let mx = ((x1 - x0) as f64 * 0.1).round() as u32;
        let my = ((y1 - y0) as f64 * 0.1).round() as u32;
        [
            x0.saturating_sub(mx).max(f.slot[0]),
            y0.saturating_sub(my),
            (x1 + mx).min(f.slot[1]).min(self.image.width()),
            (y1 + my).min(self.image.height()),
        ]
    }

    fn crop_image(&self, j: usize) -> ([u32; 4], RgbImage) {
        let r = self.crop_region(j);
        let img = image::imageops::crop_imm(&self.image, r[0], r[1], r[2] - r[0], r[3] - r[1])
            .to_image();
        (r, img)
    }

    /// A top-down person sample of figure `j` for a per-person task.
    pub fn person_sample(&self, j: usize, task: TaskType, dataset: &str) -> Result<Sample> {
        let f = self.figures.get(j).ok_or_else(|| Error::config("figure index out of range"))?;
        let (r, image) = self.crop_image(j);
        let (cw, ch) = ((r[2] - r[0]) as f64, (r[3] - r[1]) as f64);
        let gt = match task {
            TaskType::Reid => GroundTruth::Reid {
                identity: f.identity,
            },
            TaskType::Par => GroundTruth::Par {
                attributes: f.style.attributes(),
            },
            TaskType::Pose => GroundTruth::Pose {
                joints: f
                    .joints
                    .iter()
                    .map(|p| Some([(p[0] - r[0] as f64) / cw, (p[1] - r[1] as f64) / ch]))
                    .collect(),
            },
            TaskType::Seg => {
                let owner = (j + 1) as u8;
                let classes = GrayImage::from_fn(r[2] - r[0], r[3] - r[1], |x, y| {
                    let (sx, sy) = (x + r[0], y + r[1]);
                    if self.owner.get_pixel(sx, sy).0[0] == owner {
                        *self.classes.get_pixel(sx, sy)
                    } else {
                        Luma([0])
                    }
                });
                GroundTruth::Seg { classes }
            }
            TaskType::PedDet => {
                return Err(Error::config("detection samples cover the whole scene"));
            }
        };
        Ok(Sample {
            image,
            dataset: dataset.to_string(),
            gt,
        })
    }

    /// The whole scene as a detection sample.
    pub fn det_sample(&self, dataset: &str) -> Sample {
        let (w, h) = (self.image.width() as f64, self.image.height() as f64);
        let boxes = self
            .figures
            .iter()
            .map(|f| {
                let [x0, y0, x1, y1] = f.bbox.map(|v| v as f64);
                [(x0 + x1) / 2.0 / w, (y0 + y1) / 2.0 / h, (y1 - y0) / h, (x1 - x0) / w]
            })
            .collect();
        Sample {
            image: self.image.clone(),
            dataset: dataset.to_string(),
            gt: GroundTruth::Det { boxes },
        }
    }
}

/// `n` samples of one task type drawn from consecutive scenes.
pub fn synthetic_samples(
    spec: &SceneSpec,
    task: TaskType,
    n: usize,
    dataset: &str,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(n);
    let mut index = 0;
    while out.len() < n {
        let scene = generate_scene(spec, index)?;
        if task == TaskType::PedDet {
            out.push(scene.det_sample(dataset));
        } else {
            for j in 0..scene.figures.len() {
                if out.len() < n {
                    out.push(scene.person_sample(j, task, dataset)?);
                }
            }
        }
        index += 1;
    }
    Ok(out)
}

/// Fills a solid-color image; handy for fixtures.
pub fn solid_image(w: u32, h: u32, c: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(w, h, Rgb(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::toy(0);
        let a = generate_scene(&spec, 3).unwrap();
        let b = generate_scene(&spec, 3).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.figures.len(), b.figures.len());
        let c = generate_scene(&SceneSpec::toy(1), 3).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn single_figure_scene() {
        let spec = SceneSpec {
            min_figures: 1,
            max_figures: 1,
            ..SceneSpec::toy(5)
        };
        let s = generate_scene(&spec, 0).unwrap();
        assert_eq!(s.figures.len(), 1);
        match s.det_sample("d").gt {
            GroundTruth::Det { boxes } => assert_eq!(boxes.len(), 1),
            _ => unreachable!(),
        }
    }

    #[test]
    fn canvas_too_small_errors() {
        let spec = SceneSpec {
            width: 30,
            ..SceneSpec::toy(0)
        };
        assert!(generate_scene(&spec, 0).is_err());
    }

    #[test]
    fn joints_lie_on_their_parts() {
        let part_of = [HEAD, TORSO, ARMS, ARMS, LEGS, LEGS, LEGS, LEGS];
        for seed in 0..5 {
            let spec = SceneSpec::toy(seed);
            for idx in 0..6 {
                let s = generate_scene(&spec, idx).unwrap();
                for (fi, f) in s.figures.iter().enumerate() {
                    for (k, p) in f.joints.iter().enumerate() {
                        let (x, y) = (p[0].floor() as i64, p[1].floor() as i64);
                        assert!(
                            x >= f.bbox[0] as i64
                                && x < f.bbox[2] as i64
                                && y >= f.bbox[1] as i64
                                && y < f.bbox[3] as i64
                        );
                        let mut hit = false;
                        for dy in -2i64..=2 {
                            for dx in -2i64..=2 {
                                let (xx, yy) = (x + dx, y + dy);
                                if xx < 0 || yy < 0 || xx >= s.image.width() as i64 || yy >= s.image.height() as i64 {
                                    continue;
                                }
                                let (xx, yy) = (xx as u32, yy as u32);
                                if s.classes.get_pixel(xx, yy).0[0] == part_of[k]
                                    && s.owner.get_pixel(xx, yy).0[0] == (fi + 1) as u8
                                {
                                    hit = true;
                                }
                            }
                        }
                        assert!(hit, "seed {seed} scene {idx} figure {fi} joint {k}");
                    }
                }
            }
        }
    }

    #[test]
    fn attributes_match_rendering() {
        let spec = SceneSpec::toy(2);
        for idx in 0..8 {
            let s = generate_scene(&spec, idx).unwrap();
            for (j, f) in s.figures.iter().enumerate() {
                let sample = s.person_sample(j, TaskType::Seg, "seg").unwrap();
                let GroundTruth::Seg { classes } = sample.gt else { unreachable!() };
                let has_acc = classes.pixels().any(|p| p.0[0] == ACCESSORY);
                assert_eq!(has_acc, f.style.hat || f.style.bag);
            }
        }
    }

    #[test]
    fn person_crops_normalize_joints() {
        let s = generate_scene(&SceneSpec::toy(4), 1).unwrap();
        let sample = s.person_sample(0, TaskType::Pose, "pose").unwrap();
        let GroundTruth::Pose { joints } = sample.gt else { unreachable!() };
        assert_eq!(joints.len(), 8);
        assert!(joints.iter().flatten().flatten().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
