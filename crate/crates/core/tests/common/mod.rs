#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unihcp::config::{prepare_run, PreparedRun, RunConfig};
use unihcp::encoder::{ForwardMode, ImageBatch};
use unihcp::objectives::TaskTargets;
use unihcp::task::TaskType;
use unihcp::trainer::{batch_indices, Model};

pub fn toy_run(samples: usize) -> PreparedRun {
    prepare_run(&RunConfig::toy_joint(samples, 0), Path::new("."), DType::F32).unwrap()
}

/// Same structure and values in another dtype.
pub fn cast_model(m: &Model, dtype: DType) -> Model {
    let mut out = Model::build(m.config(), m.tasks(), m.mode(), 0, dtype).unwrap();
    for (task, n) in m.id_classifier_sizes() {
        out.add_id_classifier(&task, n, 0).unwrap();
    }
    for (name, var) in m.store().iter() {
        out.store().set(name, var.as_tensor()).unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub path: TaskType,
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    pub tensors: Vec<String>,
}

/// Finite-difference step in the f64 evaluation.
pub const FD_STEP: f64 = 1e-5;
/// Coordinates whose gradient is below this fraction of the tensor's
/// largest gradient are compared against that floor instead of themselves.
pub const REL_FLOOR: f64 = 1e-3;

fn with_pixels(b: &ImageBatch, pixels: Tensor) -> ImageBatch {
    ImageBatch::new(pixels, b.pad_mask.clone(), b.orig_sizes.clone()).unwrap()
}

fn flat_set(t: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut v = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    v[i] += delta;
    Tensor::from_vec(v, t.dims(), t.device()).unwrap()
}

fn loss_value(m: &Model, task: &str, b: &ImageBatch, t: &TaskTargets) -> f64 {
    let w = unihcp::objectives::LossWeights::default();
    m.loss(task, b, t, &ForwardMode::eval(), &w).unwrap().value().unwrap()
}

/// Analytic f32 gradients of one task's loss against central differences
/// of the same loss evaluated in f64, on `per_tensor` random coordinates of
/// the input pixels, query content, query positions and the parameters the
/// task's output units use.
pub fn gradient_check(run: &PreparedRun, path: TaskType, per_tensor: usize, seed: u64) -> GradCheck {
    let d = run.datasets.iter().position(|d| d.task_type == path).unwrap();
    let ds = &run.datasets[d];
    let task = ds.task_id.clone();
    let model = &run.model;
    let patch = model.config().encoder.patch_size;
    let idx = batch_indices(ds, 4, seed, d, 1);
    let (b32, t32) = ds.batch(&idx, patch, DType::F32).unwrap();
    let (b64, t64) = ds.batch(&idx, patch, DType::F64).unwrap();
    let pix = Var::from_tensor(&b32.pixels).unwrap();
    let bv = with_pixels(&b32, pix.as_tensor().clone());
    let w = unihcp::objectives::LossWeights::default();
    let grads = model.loss(&task, &bv, &t32, &ForwardMode::eval(), &w).unwrap().total.backward().unwrap();

    let mut names = vec![
        format!("queries.{task}.content"),
        "encoder.block0.attn.qkv.weight".to_string(),
    ];
    names.push(if model.store().contains(&format!("queries.{task}.anchors")) {
        format!("queries.{task}.anchors")
    } else {
        format!("queries.{task}.pos")
    });
    match path {
        TaskType::Reid => names.push(format!("aux.{task}.id_classifier.weight")),
        TaskType::Par => names.push("interpreter.global.weight".into()),
        TaskType::Seg | TaskType::Pose => names.extend([
            "interpreter.global.weight".to_string(),
            "interpreter.map.mlp.fc1.weight".to_string(),
            "interpreter.map.deconv2.weight".to_string(),
        ]),
        TaskType::PedDet => names.extend([
            "interpreter.global.weight".to_string(),
            "interpreter.bbox.mlp.fc1.weight".to_string(),
            "interpreter.bbox.mlp.fc3.weight".to_string(),
        ]),
    }

    let m64 = cast_model(model, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut max_rel = 0f64;
    let mut worst = String::new();
    let mut compare = |label: &str, analytic: Vec<f64>, f: &mut dyn FnMut(usize, f64) -> f64| {
        let scale = analytic.iter().fold(0f64, |a, b| a.max(b.abs()));
        for _ in 0..per_tensor {
            let i = rng.random_range(0..analytic.len());
            let num = (f(i, FD_STEP) - f(i, -FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(REL_FLOOR * scale).max(1e-12);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{label}[{i}] analytic {a:.6e} numeric {num:.6e}");
            }
        }
    };

    let ga = grads.get(pix.as_tensor()).unwrap().to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let base_pix = b64.pixels.clone();
    compare("pixels", ga, &mut |i, h| loss_value(&m64, &task, &with_pixels(&b64, flat_set(&base_pix, i, h)), &t64));
    for name in &names {
        let var = model.store().var(name).unwrap();
        let ga = grads.get(var.as_tensor()).unwrap().to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = m64.store().get(name).unwrap().copy().unwrap();
        compare(name, ga, &mut |i, h| {
            m64.store().set(name, &flat_set(&base, i, h)).unwrap();
            let v = loss_value(&m64, &task, &b64, &t64);
            m64.store().set(name, &base).unwrap();
            v
        });
    }
    let mut tensors = vec!["pixels".to_string()];
    tensors.extend(names);
    GradCheck { path, checked, max_rel, worst, tensors }
}
