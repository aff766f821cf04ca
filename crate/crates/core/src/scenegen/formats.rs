//! Dataset manifests and the on-disk annotation layouts.
//!
//! | format                     | layout under the dataset root                         |
//! |----------------------------|-------------------------------------------------------|
//! | `keypoint-annotation-file` | `annotations.json` (images/annotations/categories), `images/` |
//! | `box-annotation-file`      | same container, boxes only                            |
//! | `mask-directory`           | `images/*.png`, `masks/*.png` (same stem), optional `classes.txt` |
//! | `identity-directory`       | `<identity>/<image>.png`                              |
//! | `attribute-table`          | `attributes.csv` (header `image,<attr>...`), `images/` |

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    synthetic_samples, GroundTruth, Sample, SceneSpec, ATTRIBUTE_NAMES, JOINT_NAMES, PART_NAMES,
};
use crate::error::{Error, Result};
use crate::task::TaskType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Synthetic,
    KeypointAnnotationFile,
    MaskDirectory,
    IdentityDirectory,
    AttributeTable,
    BoxAnnotationFile,
}

impl DataFormat {
    /// The task type a file format carries; `None` for synthetic data,
    /// which can serve every task.
    pub fn task_type(self) -> Option<TaskType> {
        match self {
            DataFormat::Synthetic => None,
            DataFormat::KeypointAnnotationFile => Some(TaskType::Pose),
            DataFormat::MaskDirectory => Some(TaskType::Seg),
            DataFormat::IdentityDirectory => Some(TaskType::Reid),
            DataFormat::AttributeTable => Some(TaskType::Par),
            DataFormat::BoxAnnotationFile => Some(TaskType::PedDet),
        }
    }

    pub fn for_task(task: TaskType) -> Self {
        match task {
            TaskType::Pose => DataFormat::KeypointAnnotationFile,
            TaskType::Seg => DataFormat::MaskDirectory,
            TaskType::Reid => DataFormat::IdentityDirectory,
            TaskType::Par => DataFormat::AttributeTable,
            TaskType::PedDet => DataFormat::BoxAnnotationFile,
        }
    }
}

fn default_split() -> String {
    "train".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub task_type: TaskType,
    pub format: DataFormat,
    /// Relative paths resolve against the data root.
    #[serde(default)]
    pub root: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
    pub batch_size: usize,
    /// Sample count for synthetic datasets.
    #[serde(default)]
    pub samples: Option<usize>,
    /// Scene seed for synthetic datasets.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(rename = "dataset")]
    pub datasets: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("manifest: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::config(format!("duplicate dataset id `{}`", d.id)));
            }
            if d.batch_size == 0 {
                return Err(Error::config(format!("dataset `{}` has batch size 0", d.id)));
            }
            if let Some(t) = d.format.task_type() {
                if t != d.task_type {
                    return Err(Error::config(format!(
                        "dataset `{}`: format {:?} carries {t} data, not {}",
                        d.id, d.format, d.task_type
                    )));
                }
            }
            if d.format == DataFormat::Synthetic && d.samples.unwrap_or(0) == 0 {
                return Err(Error::config(format!(
                    "synthetic dataset `{}` needs a positive sample count",
                    d.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub entry: DatasetEntry,
    pub samples: Vec<Sample>,
    /// Records dropped for lacking labels.
    pub skipped: usize,
    /// Query slots implied by the data: joints, classes or attributes.
    /// Zero for re-identification and detection, whose counts are model
    /// choices.
    pub num_queries: usize,
    pub class_names: Vec<String>,
    /// Distinct identities (re-identification only).
    pub num_identities: usize,
}

fn malformed(file: &Path, record: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        file: file.to_path_buf(),
        record,
        message: message.into(),
    }
}

fn read_rgb(path: &Path, record: usize) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| malformed(path, record, e.to_string()))?;
    Ok(img.to_rgb8())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| malformed(path, 0, e.to_string()))
}

#[derive(Debug, Deserialize)]
struct ImageRecord {
    id: u64,
    file_name: String,
}

#[derive(Debug, Deserialize)]
struct AnnotationRecord {
    image_id: u64,
    #[serde(default)]
    bbox: Option<Vec<f64>>,
    #[serde(default)]
    keypoints: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct CategoryRecord {
    #[serde(default)]
    keypoints: Vec<String>,
}

struct Container {
    file: PathBuf,
    images: BTreeMap<u64, String>,
    annotations: Vec<(usize, AnnotationRecord)>,
    keypoint_names: Vec<String>,
}

fn array<'a>(v: &'a Value, key: &str, file: &Path) -> Result<&'a Vec<Value>> {
    v.get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(file, 0, format!("missing `{key}` array")))
}

fn read_container(root: &Path) -> Result<Container> {
    let file = root.join("annotations.json");
    let v = read_json(&file)?;
    let mut images = BTreeMap::new();
    for (i, rec) in array(&v, "images", &file)?.iter().enumerate() {
        let r: ImageRecord =
            serde_json::from_value(rec.clone()).map_err(|e| malformed(&file, i, format!("image: {e}")))?;
        images.insert(r.id, r.file_name);
    }
    let mut annotations = Vec::new();
    for (i, rec) in array(&v, "annotations", &file)?.iter().enumerate() {
        let a: AnnotationRecord = serde_json::from_value(rec.clone())
            .map_err(|e| malformed(&file, i, format!("annotation: {e}")))?;
        if !images.contains_key(&a.image_id) {
            return Err(malformed(&file, i, format!("unknown image id {}", a.image_id)));
        }
        annotations.push((i, a));
    }
    let keypoint_names = match v.get("categories").and_then(Value::as_array) {
        Some(cats) if !cats.is_empty() => {
            let c: CategoryRecord = serde_json::from_value(cats[0].clone())
                .map_err(|e| malformed(&file, 0, format!("category: {e}")))?;
            c.keypoints
        }
        _ => Vec::new(),
    };
    Ok(Container {
        file,
        images,
        annotations,
        keypoint_names,
    })
}

fn xywh(b: &Option<Vec<f64>>, file: &Path, record: usize) -> Result<Option<[f64; 4]>> {
    match b {
        None => Ok(None),
        Some(v) if v.len() == 4 && v.iter().all(|x| x.is_finite()) => {
            if v[2] <= 0.0 || v[3] <= 0.0 {
                return Err(malformed(file, record, "box with non-positive size"));
            }
            Ok(Some([v[0], v[1], v[2], v[3]]))
        }
        Some(_) => Err(malformed(file, record, "bbox must be 4 finite numbers [x, y, w, h]")),
    }
}

/// Top-down person samples from a keypoint annotation container. Each
/// annotation's box, grown by 10% per side, is the crop.
pub fn load_keypoint_file(entry: &DatasetEntry, root: &Path) -> Result<LoadedDataset> {
    let c = read_container(root)?;
    let k = c.keypoint_names.len();
    let mut samples = Vec::new();
    let mut skipped = 0;
    let mut cache: BTreeMap<u64, RgbImage> = BTreeMap::new();
    for (i, a) in &c.annotations {
        let Some(kp) = &a.keypoints else {
            skipped += 1;
            continue;
        };
        if k == 0 || kp.len() != 3 * k {
            return Err(malformed(
                &c.file,
                *i,
                format!("{} keypoint values for {k} named joints", kp.len()),
            ));
        }
        if kp.chunks(3).all(|t| t[2] <= 0.0) {
            skipped += 1;
            continue;
        }
        let Some([bx, by, bw, bh]) = xywh(&a.bbox, &c.file, *i)? else {
            return Err(malformed(&c.file, *i, "keypoint annotation without bbox"));
        };
        if !cache.contains_key(&a.image_id) {
            let path = root.join("images").join(&c.images[&a.image_id]);
            cache.insert(a.image_id, read_rgb(&path, *i)?);
        }
        let img = &cache[&a.image_id];
        let (iw, ih) = (img.width() as f64, img.height() as f64);
        let x0 = (bx - 0.1 * bw).floor().max(0.0);
        let y0 = (by - 0.1 * bh).floor().max(0.0);
        let x1 = (bx + 1.1 * bw).ceil().min(iw);
        let y1 = (by + 1.1 * bh).ceil().min(ih);
        if x1 <= x0 || y1 <= y0 {
            return Err(malformed(&c.file, *i, "bbox lies outside its image"));
        }
        let (cw, ch) = (x1 - x0, y1 - y0);
        let crop =
            image::imageops::crop_imm(img, x0 as u32, y0 as u32, cw as u32, ch as u32).to_image();
        let joints = kp
            .chunks(3)
            .map(|t| {
                let p = [(t[0] - x0) / cw, (t[1] - y0) / ch];
                (t[2] > 0.0 && p.iter().all(|v| (0.0..=1.0).contains(v))).then_some(p)
            })
            .collect();
        samples.push(Sample {
            image: crop,
            dataset: entry.id.clone(),
            gt: GroundTruth::Pose { joints },
        });
    }
    Ok(LoadedDataset {
        entry: entry.clone(),
        samples,
        skipped,
        num_queries: k,
        class_names: c.keypoint_names,
        num_identities: 0,
    })
}

/// Whole-image detection samples; images without boxes are skipped.
pub fn load_box_file(entry: &DatasetEntry, root: &Path) -> Result<LoadedDataset> {
    let c = read_container(root)?;
    let mut by_image: BTreeMap<u64, Vec<(usize, [f64; 4])>> = BTreeMap::new();
    for (i, a) in &c.annotations {
        if let Some(b) = xywh(&a.bbox, &c.file, *i)? {
            by_image.entry(a.image_id).or_default().push((*i, b));
        }
    }
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (id, name) in &c.images {
        let Some(anns) = by_image.get(id) else {
            skipped += 1;
            continue;
        };
        let img = read_rgb(&root.join("images").join(name), anns[0].0)?;
        let (w, h) = (img.width() as f64, img.height() as f64);
        let mut boxes = Vec::with_capacity(anns.len());
        for (i, [x, y, bw, bh]) in anns {
            let x0 = x.max(0.0);
            let y0 = y.max(0.0);
            let x1 = (x + bw).min(w);
            let y1 = (y + bh).min(h);
            if x1 <= x0 || y1 <= y0 {
                return Err(malformed(&c.file, *i, "box lies outside its image"));
            }
            boxes.push([(x0 + x1) / 2.0 / w, (y0 + y1) / 2.0 / h, (y1 - y0) / h, (x1 - x0) / w]);
        }
        samples.push(Sample {
            image: img,
            dataset: entry.id.clone(),
            gt: GroundTruth::Det { boxes },
        });
    }
    Ok(LoadedDataset {
        entry: entry.clone(),
        samples,
        skipped,
        num_queries: 0,
        class_names: vec!["person".into()],
        num_identities: 0,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Parses `classes.txt` lines of the form `<raw value> <name>`.
fn read_class_list(path: &Path) -> Result<Vec<(u8, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut it = line.split_whitespace();
        let raw = it
            .next()
            .and_then(|v| v.parse::<u8>().ok())
            .ok_or_else(|| malformed(path, i, "expected `<value> <name>`"))?;
        let name = it.collect::<Vec<_>>().join(" ");
        out.push((raw, if name.is_empty() { format!("class{raw}") } else { name }));
    }
    Ok(out)
}

/// Image/mask pairs; mask values are remapped to contiguous class ids.
pub fn load_mask_dir(entry: &DatasetEntry, root: &Path) -> Result<LoadedDataset> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (i, img_path) in sorted_entries(&root.join("images"))?
        .into_iter()
        .filter(|p| is_png(p))
        .enumerate()
    {
        let mask_path = root.join("masks").join(img_path.file_name().unwrap());
        if !mask_path.exists() {
            skipped += 1;
            continue;
        }
        let img = read_rgb(&img_path, i)?;
        let mask = image::open(&mask_path)
            .map_err(|e| malformed(&mask_path, i, e.to_string()))?
            .to_luma8();
        if mask.dimensions() != img.dimensions() {
            return Err(malformed(&mask_path, i, "mask and image sizes differ"));
        }
        pairs.push((i, mask_path, img, mask));
    }
    let class_file = root.join("classes.txt");
    let classes: Vec<(u8, String)> = if class_file.exists() {
        read_class_list(&class_file)?
    } else {
        let mut seen = BTreeSet::new();
        seen.insert(0u8);
        for (_, _, _, m) in &pairs {
            seen.extend(m.pixels().map(|p| p.0[0]));
        }
        seen.into_iter().map(|v| (v, format!("class{v}"))).collect()
    };
    let mut lut = [None; 256];
    for (idx, (raw, _)) in classes.iter().enumerate() {
        lut[*raw as usize] = Some(idx as u8);
    }
    let mut samples = Vec::with_capacity(pairs.len());
    for (i, path, img, mask) in pairs {
        let mut out = GrayImage::new(mask.width(), mask.height());
        for (x, y, p) in mask.enumerate_pixels() {
            let id = lut[p.0[0] as usize]
                .ok_or_else(|| malformed(&path, i, format!("undeclared mask value {}", p.0[0])))?;
            out.put_pixel(x, y, Luma([id]));
        }
        samples.push(Sample {
            image: img,
            dataset: entry.id.clone(),
            gt: GroundTruth::Seg { classes: out },
        });
    }
    Ok(LoadedDataset {
        entry: entry.clone(),
        samples,
        skipped,
        num_queries: classes.len(),
        class_names: classes.into_iter().map(|c| c.1).collect(),
        num_identities: 0,
    })
}

/// `<identity>/<image>.png`; identities numbered by sorted directory name.
/// Images outside an identity directory have no label and are skipped.
pub fn load_identity_dir(entry: &DatasetEntry, root: &Path) -> Result<LoadedDataset> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    let mut names = Vec::new();
    let mut record = 0;
    for p in sorted_entries(root)? {
        if p.is_dir() {
            let id = names.len();
            names.push(p.file_name().unwrap().to_string_lossy().into_owned());
            for f in sorted_entries(&p)?.into_iter().filter(|f| is_png(f)) {
                samples.push(Sample {
                    image: read_rgb(&f, record)?,
                    dataset: entry.id.clone(),
                    gt: GroundTruth::Reid { identity: id },
                });
                record += 1;
            }
        } else if is_png(&p) {
            skipped += 1;
        }
    }
    Ok(LoadedDataset {
        entry: entry.clone(),
        samples,
        skipped,
        num_queries: 0,
        num_identities: names.len(),
        class_names: names,
    })
}

/// Header-first CSV: `image,<attr_1>,...,<attr_A>` with 0/1 cells. A row
/// with an empty cell lacks labels and is skipped.
pub fn load_attribute_table(entry: &DatasetEntry, root: &Path) -> Result<LoadedDataset> {
    let file = root.join("attributes.csv");
    let mut rdr = csv::Reader::from_path(&file).map_err(|e| malformed(&file, 0, e.to_string()))?;
    let header = rdr.headers().map_err(|e| malformed(&file, 0, e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(malformed(&file, 0, "header needs an image column and attributes"));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| malformed(&file, i + 1, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(malformed(&file, i + 1, "column count differs from header"));
        }
        let cells: Vec<&str> = rec.iter().skip(1).map(str::trim).collect();
        if cells.iter().any(|c| c.is_empty()) {
            skipped += 1;
            continue;
        }
        let attributes = cells
            .iter()
            .map(|c| match *c {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(malformed(&file, i + 1, format!("attribute value `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            image: read_rgb(&root.join("images").join(&rec[0]), i + 1)?,
            dataset: entry.id.clone(),
            gt: GroundTruth::Par { attributes },
        });
    }
    Ok(LoadedDataset {
        entry: entry.clone(),
        samples,
        skipped,
        num_queries: names.len(),
        class_names: names,
        num_identities: 0,
    })
}

/// Loads any manifest entry; relative roots resolve against `data_root`.
pub fn load_dataset(entry: &DatasetEntry, data_root: &Path) -> Result<LoadedDataset> {
    let root = if entry.root.is_absolute() {
        entry.root.clone()
    } else {
        data_root.join(&entry.root)
    };
    match entry.format {
        DataFormat::Synthetic => {
            let spec = SceneSpec::toy(entry.seed.unwrap_or(0));
            let n = entry.samples.unwrap_or(0);
            let samples = synthetic_samples(&spec, entry.task_type, n, &entry.id)?;
            let (num_queries, class_names) = match entry.task_type {
                TaskType::Pose => (JOINT_NAMES.len(), names(&JOINT_NAMES)),
                TaskType::Seg => (PART_NAMES.len(), names(&PART_NAMES)),
                TaskType::Par => (ATTRIBUTE_NAMES.len(), names(&ATTRIBUTE_NAMES)),
                TaskType::Reid | TaskType::PedDet => (0, Vec::new()),
            };
            let num_identities = if entry.task_type == TaskType::Reid {
                spec.identities
            } else {
                0
            };
            Ok(LoadedDataset {
                entry: entry.clone(),
                samples,
                skipped: 0,
                num_queries,
                class_names,
                num_identities,
            })
        }
        DataFormat::KeypointAnnotationFile => load_keypoint_file(entry, &root),
        DataFormat::BoxAnnotationFile => load_box_file(entry, &root),
        DataFormat::MaskDirectory => load_mask_dir(entry, &root),
        DataFormat::IdentityDirectory => load_identity_dir(entry, &root),
        DataFormat::AttributeTable => load_attribute_table(entry, &root),
    }
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| malformed(path, 0, e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `n` synthetic records in `format` under `root` and returns the
/// number written. Keypoint files count annotated people, box files count
/// images.
pub fn write_dataset(root: &Path, format: DataFormat, spec: &SceneSpec, n: usize) -> Result<usize> {
    mkdir(root)?;
    match format {
        DataFormat::Synthetic => Err(Error::config("synthetic datasets are generated on the fly")),
        DataFormat::KeypointAnnotationFile | DataFormat::BoxAnnotationFile => {
            mkdir(&root.join("images"))?;
            let with_kp = format == DataFormat::KeypointAnnotationFile;
            let (mut images, mut anns) = (Vec::new(), Vec::new());
            let mut index = 0;
            let mut count = 0;
            while count < n {
                let scene = super::generate_scene(spec, index)?;
                let name = format!("{index:05}.png");
                save_png(&scene.image, &root.join("images").join(&name))?;
                images.push(json!({
                    "id": index,
                    "file_name": name,
                    "width": scene.image.width(),
                    "height": scene.image.height(),
                }));
                for f in &scene.figures {
                    if with_kp && count >= n {
                        break;
                    }
                    let [x0, y0, x1, y1] = f.bbox;
                    let mut a = json!({
                        "id": anns.len(),
                        "image_id": index,
                        "category_id": 1,
                        "bbox": [x0, y0, x1 - x0, y1 - y0],
                        "area": (x1 - x0) * (y1 - y0),
                        "iscrowd": 0,
                    });
                    if with_kp {
                        let kp: Vec<f64> =
                            f.joints.iter().flat_map(|p| [p[0], p[1], 2.0]).collect();
                        a["keypoints"] = json!(kp);
                        a["num_keypoints"] = json!(f.joints.len());
                        count += 1;
                    }
                    anns.push(a);
                }
                if !with_kp {
                    count += 1;
                }
                index += 1;
            }
            let doc = json!({
                "images": images,
                "annotations": anns,
                "categories": [{
                    "id": 1,
                    "name": "person",
                    "keypoints": if with_kp { JOINT_NAMES.to_vec() } else { Vec::new() },
                }],
            });
            write_text(&root.join("annotations.json"), &serde_json::to_string_pretty(&doc)?)?;
            Ok(count)
        }
        DataFormat::MaskDirectory => {
            mkdir(&root.join("images"))?;
            mkdir(&root.join("masks"))?;
            for (i, s) in synthetic_samples(spec, TaskType::Seg, n, "")?.iter().enumerate() {
                let GroundTruth::Seg { classes } = &s.gt else { unreachable!() };
                let name = format!("{i:05}.png");
                save_png(&s.image, &root.join("images").join(&name))?;
                save_png(classes, &root.join("masks").join(&name))?;
            }
            let list: String = PART_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| format!("{i} {n}\n"))
                .collect();
            write_text(&root.join("classes.txt"), &list)?;
            Ok(n)
        }
        DataFormat::IdentityDirectory => {
            for (i, s) in synthetic_samples(spec, TaskType::Reid, n, "")?.iter().enumerate() {
                let GroundTruth::Reid { identity } = s.gt else { unreachable!() };
                let dir = root.join(format!("id{identity:04}"));
                mkdir(&dir)?;
                save_png(&s.image, &dir.join(format!("{i:05}.png")))?;
            }
            Ok(n)
        }
        DataFormat::AttributeTable => {
            mkdir(&root.join("images"))?;
            let file = root.join("attributes.csv");
            let mut w = csv::Writer::from_path(&file).map_err(|e| malformed(&file, 0, e.to_string()))?;
            let mut header = vec!["image".to_string()];
            header.extend(names(&ATTRIBUTE_NAMES));
            w.write_record(&header).map_err(|e| malformed(&file, 0, e.to_string()))?;
            for (i, s) in synthetic_samples(spec, TaskType::Par, n, "")?.iter().enumerate() {
                let GroundTruth::Par { attributes } = &s.gt else { unreachable!() };
                let name = format!("{i:05}.png");
                save_png(&s.image, &root.join("images").join(&name))?;
                let mut row = vec![name];
                row.extend(attributes.iter().map(|a| if *a { "1" } else { "0" }.to_string()));
                w.write_record(&row).map_err(|e| malformed(&file, i + 1, e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(&file, e))?;
            Ok(n)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_validation() {
        let ok = r#"
            [[dataset]]
            id = "pose-toy"
            task_type = "pose"
            format = "keypoint-annotation-file"
            root = "pose"
            batch_size = 4
        "#;
        let m = DatasetManifest::from_toml(ok).unwrap();
        assert_eq!(m.datasets[0].split, "train");
        let bad = ok.replace("\"pose\"\n", "\"seg\"\n");
        assert!(DatasetManifest::from_toml(&bad).is_err());
        let zero = ok.replace("batch_size = 4", "batch_size = 0");
        assert!(DatasetManifest::from_toml(&zero).is_err());
        let unknown = ok.replace("batch_size = 4", "batch_size = 4\ncolour = 1");
        assert!(DatasetManifest::from_toml(&unknown).is_err());
    }
}
