//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! the process stderr handle (not the captured test output) before asserting.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unihcp::config::{prepare_data, prepare_run, reference_tasks, RunConfig};
use unihcp::encoder::{interpolate_pos_embed, ForwardMode, PosInterp};
use unihcp::interpreter::{bbox_from_logits, Unit};
use unihcp::metrics::evaluate_dataset;
use unihcp::objectives::{
    brute_force_match, det_cost_matrix, dice_loss, focal_loss, giou, hungarian_match, LossWeights,
};
use unihcp::scenegen::{DataFormat, DatasetEntry};
use unihcp::task::TaskType;
use unihcp::trainer::{
    compute_loss_weights, declare_model, layer_decay_scale, load_checkpoint, loss_weight_products,
    lr_at, save_checkpoint, store_specs, trainable_mask_report, MaskMode, Model, ModelConfig,
    ParamShareReport, PlanDataset, SharingMode, TrainPlan, Trainer, TrainableMask,
};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2} {:<4} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

#[test]
fn c01_parameter_reconstruction() {
    let specs = declare_model(&ModelConfig::paper(), &reference_tasks(), SharingMode::Baseline).unwrap();
    let r = ParamShareReport::from_specs(&specs);
    let (e, d, i) = (r.encoder as f64, r.decoder as f64, r.interpreter as f64);
    let pass = within(e, 91.1e6, 0.02) && within(d, 14.5e6, 0.03) && within(i, 3.5e6, 0.05) && r.ratio >= 0.999;
    let detail = format!(
        "encoder {:.2}M decoder {:.2}M interpreter {:.2}M task-agnostic {:.3}%",
        e / 1e6, d / 1e6, i / 1e6, 100.0 * r.ratio
    );
    report(1, "parameter reconstruction", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c02_sharing_mode_ordering() {
    let tasks = reference_tasks();
    let types: BTreeSet<_> = tasks.iter().map(|t| t.task_type).collect();
    assert!(tasks.len() >= 6 && types.len() == 5);
    let order = [SharingMode::Baseline, SharingMode::PerTaskInterpreter, SharingMode::PerTaskType, SharingMode::EncoderOnly];
    let totals: Vec<usize> = order
        .iter()
        .map(|&m| ParamShareReport::from_specs(&declare_model(&ModelConfig::paper(), &tasks, m).unwrap()).total)
        .collect();
    let pass = totals.windows(2).all(|w| w[0] < w[1]);
    let detail = order
        .iter()
        .zip(&totals)
        .map(|(m, t)| format!("{} {:.2}M", m.as_str(), *t as f64 / 1e6))
        .collect::<Vec<_>>()
        .join(" < ");
    report(2, "sharing-mode ordering", pass, &detail);
    assert!(pass, "{detail}");
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.02..0.6), rng.random_range(0.02..0.6)]
}

#[test]
fn c03_matcher_oracle() {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let instances = 500;
    let mut worst = 0f64;
    for _ in 0..instances {
        let preds = rng.random_range(1..=7);
        let gts = rng.random_range(0..=preds);
        let probs: Vec<f64> = (0..preds).map(|_| rng.random_range(0.001..0.999)).collect();
        let boxes: Vec<[f64; 4]> = (0..preds).map(|_| random_box(&mut rng)).collect();
        let gt: Vec<[f64; 4]> = (0..gts).map(|_| random_box(&mut rng)).collect();
        let cost = det_cost_matrix(&probs, &boxes, &gt, &w).unwrap();
        let h = hungarian_match(&probs, &boxes, &gt, &w).unwrap();
        let b = brute_force_match(&probs, &boxes, &gt, &w).unwrap();
        assert_eq!(h.pairs.len(), gts);
        let total: f64 = h.pairs.iter().map(|&(g, p)| cost[g][p]).sum();
        worst = worst.max((h.cost - b.cost).abs()).max((total - h.cost).abs());
    }
    let pass = worst <= 1e-9;
    let detail = format!("{instances} instances, largest cost difference {worst:.2e}");
    report(3, "matcher oracle", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c04_gradient_suite() {
    let run = common::toy_run(4);
    let mut lines = Vec::new();
    let mut pass = true;
    for path in TaskType::ALL {
        let r = common::gradient_check(&run, path, 8, 11);
        pass &= r.max_rel <= 1e-3;
        lines.push(format!("{} {:.1e}", path.as_str(), r.max_rel));
    }
    let detail = format!("max relative error per path: {}", lines.join(", "));
    report(4, "gradient suite", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c05_loss_weight_formula() {
    // Batch size, task type and printed `b·w` for every row of the joint
    // training sheet.
    let rows: &[(&str, usize, TaskType, f64)] = &[
        ("crowdhuman", 212, TaskType::PedDet, 424.0),
        ("market1501", 96, TaskType::Reid, 960.0),
        ("dgmarket", 415, TaskType::Reid, 4150.0),
        ("coco_pose", 286, TaskType::Pose, 572_000.0),
        ("aic", 720, TaskType::Pose, 1_440_000.0),
        ("posetrack", 185, TaskType::Pose, 3_710_000.0),
        ("mhp", 77, TaskType::Pose, 154_000.0),
        ("3dpw", 131, TaskType::Pose, 262_000.0),
        ("upenn", 66, TaskType::Pose, 132_000.0),
        ("jrdb", 266, TaskType::Pose, 532_000.0),
        ("halpe", 79, TaskType::Pose, 158_000.0),
        ("h36m_pose", 596, TaskType::Pose, 1_192_000.0),
        ("lip", 58, TaskType::Seg, 290.0),
        ("cihp", 54, TaskType::Seg, 270.0),
        ("deepfashion", 364, TaskType::Seg, 1820.0),
        ("vip", 35, TaskType::Seg, 175.0),
        ("modanet", 100, TaskType::Seg, 500.0),
        ("h36m_parse", 120, TaskType::Seg, 600.0),
        ("pa100k", 172, TaskType::Par, 1.72),
        ("rapv2", 130, TaskType::Par, 1.3),
        ("hardhc", 54, TaskType::Par, 0.54),
        ("uav_human", 31, TaskType::Par, 0.31),
        ("parse27k", 52, TaskType::Par, 0.52),
        ("market_attr", 25, TaskType::Par, 0.25),
    ];
    // The printed PoseTrack product is ten times 185·2000; every other row
    // is exactly b·w.
    let misprinted = ["posetrack"];
    let mk = |rows: &[(&str, usize, TaskType, f64)]| {
        TrainPlan::paper(
            rows.iter().map(|&(id, b, t, _)| PlanDataset { id: id.into(), task_id: id.into(), task_type: t, batch_size: b }).collect(),
            1000,
        )
    };
    let pair = mk(&[rows[1], rows[12]]);
    let prod = loss_weight_products(&pair);
    let w = compute_loss_weights(&pair).unwrap();
    let pair_ok = prod["market1501"] == 960.0
        && prod["lip"] == 290.0
        && (w.values().sum::<f64>() - 1.0).abs() <= 1e-12
        && (w["market1501"] - 960.0 / 1250.0).abs() <= 1e-12;

    let full = mk(rows);
    let prod = loss_weight_products(&full);
    let mut mismatched = Vec::new();
    for &(id, b, _, printed) in rows {
        if (prod[id] - printed).abs() > 1e-9 * printed {
            mismatched.push(format!("{id} {} vs printed {printed} (b={b})", prod[id]));
        }
    }
    let unexpected: Vec<_> = mismatched.iter().filter(|m| !misprinted.iter().any(|id| m.starts_with(id))).collect();
    let wsum: f64 = compute_loss_weights(&full).unwrap().values().sum();
    let pass = pair_ok && unexpected.is_empty() && mismatched.len() == misprinted.len() && (wsum - 1.0).abs() <= 1e-12;
    let detail = format!(
        "960/290 pair {}, {} of {} sheet products reproduced, known misprint: {}, weights sum to 1 {:+.1e}",
        if pair_ok { "ok" } else { "wrong" },
        rows.len() - mismatched.len(),
        rows.len(),
        mismatched.join("; "),
        wsum - 1.0
    );
    report(5, "loss-weight formula", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c06_joint_overfit() {
    let max_steps = 3000;
    let every = 250;
    let mut cfg = RunConfig::toy_joint(16, 0);
    cfg.train.total_steps = Some(max_steps);
    let run = prepare_run(&cfg, Path::new("."), DType::F32).unwrap();
    let enc = &run.model.config().encoder;
    let dec = &run.model.config().decoder;
    assert_eq!((enc.depth, enc.width, dec.depth, dec.width), (2, 64, 2, 64));
    assert!(run.datasets.iter().all(|d| d.len() == 16));
    let thresholds: &[(TaskType, &str, f64)] = &[
        (TaskType::Seg, "miou", 0.85),
        (TaskType::Par, "ma", 0.95),
        (TaskType::Pose, "pck@0.1", 0.90),
        (TaskType::Reid, "top1", 1.0),
        (TaskType::PedDet, "ap50", 0.80),
    ];
    let start = Instant::now();
    let mut trainer = Trainer::new(run.model, run.plan, &[]).unwrap();
    let mut step = 0;
    let mut last = String::new();
    let mut pass = false;
    while step < max_steps && !pass {
        trainer.run(&run.datasets, every, None, |_| {}).unwrap();
        step += every;
        pass = true;
        let mut parts = Vec::new();
        for &(t, key, min) in thresholds {
            let d = run.datasets.iter().find(|d| d.task_type == t).unwrap();
            let v = evaluate_dataset(trainer.model(), d, 8).unwrap().metrics[key];
            pass &= v >= min;
            parts.push(format!("{key} {v:.3}"));
        }
        last = parts.join(", ");
    }
    let detail = format!("after {step} steps ({:.0}s): {last}", start.elapsed().as_secs_f64());
    report(6, "joint overfit", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c07_gating_contract() {
    let run = common::toy_run(2);
    let patch = run.model.config().encoder.patch_size;
    // Emitted unit sets per task type, and the counter slots
    // [feature, global, map features, map, bbox] each set must advance.
    let expected = |t: TaskType| -> (Vec<Unit>, [usize; 5]) {
        match t {
            TaskType::Reid => (vec![Unit::Feature], [1, 0, 0, 0, 0]),
            TaskType::Par => (vec![Unit::Global], [0, 1, 0, 0, 0]),
            TaskType::Seg | TaskType::Pose => (vec![Unit::Global, Unit::Map], [0, 1, 1, 1, 0]),
            TaskType::PedDet => (vec![Unit::Global, Unit::BBox], [0, 1, 0, 0, 1]),
        }
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for ds in &run.datasets {
        let interp = run.model.interpreter_for(&ds.task_id).unwrap();
        let before = interp.counters.snapshot();
        let (images, _) = ds.batch(&[0, 1], patch, DType::F32).unwrap();
        let out = run.model.forward(&ds.task_id, &images, &ForwardMode::eval(), None).unwrap();
        let after = interp.counters.snapshot();
        let delta: Vec<usize> = after.iter().zip(before).map(|(a, b)| a - b).collect();
        let (units, counts) = expected(ds.task_type);
        let ok = out.units[0].present() == units && delta == counts;
        pass &= ok;
        parts.push(format!("{} {:?}", ds.task_type.as_str(), delta));
    }
    let detail = format!("counter deltas {}", parts.join(", "));
    report(7, "gating contract", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c08_schedule_contract() {
    let cfg = RunConfig::new(unihcp::config::Preset::Paper);
    let plan = cfg.plan();
    let total = plan.total_steps;
    let at_peak = lr_at(1500, &plan);
    let at_end = lr_at(total, &plan);
    // Both pieces of the schedule meet at the peak: the warmup line from
    // below and the cosine from above.
    let line = (lr_at(1499, &plan) - 1e-3 * 1499.0 / 1500.0).abs();
    let jump = (lr_at(1501, &plan) - at_peak).abs().max(line);
    let top = layer_decay_scale("encoder.block11.attn.qkv.weight", 12, plan.layer_decay).unwrap();
    let pass = (at_peak - 1e-3).abs() <= 1e-15 && at_end == 0.0 && jump <= 1e-9 && top == 0.75;
    let detail = format!("lr(1500) {at_peak:e}, lr({total}) {at_end:e}, warmup seam {jump:.1e}, top block x{top}");
    report(8, "schedule contract", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c09_prompt_mask_contract() {
    // Learnable share under the `paper` preset, for every reference task.
    let tasks = reference_tasks();
    let specs = declare_model(&ModelConfig::paper(), &tasks, SharingMode::Baseline).unwrap();
    let mut worst_share = 0f64;
    for t in &tasks {
        let mask = TrainableMask::resolve(MaskMode::PromptQueries, &specs, &tasks, SharingMode::Baseline, &[t.task_id.clone()]).unwrap();
        worst_share = worst_share.max(trainable_mask_report(&specs, &mask).ratio);
    }

    // Fifty tuning steps on a new pose dataset over the toy model.
    let base = common::toy_run(2).model;
    let mut tune = RunConfig::toy_joint(8, 0);
    tune.datasets = vec![DatasetEntry {
        id: "new_pose".into(),
        task_type: TaskType::Pose,
        format: DataFormat::Synthetic,
        root: Default::default(),
        split: "train".into(),
        batch_size: 4,
        samples: Some(8),
        seed: Some(5),
    }];
    tune.train.total_steps = Some(50);
    tune.train.mask_mode = Some(MaskMode::PromptQueries);
    let data = prepare_data(&tune, Path::new(".")).unwrap();
    let mut all = base.tasks().to_vec();
    all.extend(data.tasks.iter().cloned());
    let mut model = Model::build(base.config(), &all, base.mode(), 1, DType::F32).unwrap();
    for (task, n) in base.id_classifier_sizes() {
        model.add_id_classifier(&task, n, 0).unwrap();
    }
    for (name, var) in base.store().iter() {
        model.store().set(name, var.as_tensor()).unwrap();
    }
    let snapshot = |m: &Model| -> Vec<(String, Vec<u32>)> {
        m.store().iter().map(|(n, _)| (n.to_string(), m.store().values_f32(n).unwrap().iter().map(|v| v.to_bits()).collect())).collect()
    };
    let before = snapshot(&model);
    let mut trainer = Trainer::new(model, tune.plan(), &["new_pose".to_string()]).unwrap();
    trainer.run(&data.datasets, 50, None, |_| {}).unwrap();
    let after = snapshot(trainer.model());
    let learnable: Vec<&String> = before.iter().filter(|(n, _)| trainer.mask().contains(n)).map(|(n, _)| n).collect();
    assert!(learnable.iter().all(|n| n.starts_with("queries.new_pose.")), "{learnable:?}");
    let mut frozen_changed = 0;
    let mut tuned_changed = 0;
    for ((n, a), (_, b)) in before.iter().zip(&after) {
        let changed = a != b;
        if trainer.mask().contains(n) {
            tuned_changed += changed as usize;
        } else {
            frozen_changed += changed as usize;
        }
    }
    let toy_share = trainable_mask_report(&store_specs(trainer.model().store()), trainer.mask()).ratio;
    let pass = frozen_changed == 0 && tuned_changed > 0 && worst_share < 0.001;
    let detail = format!(
        "{} frozen tensors changed over 50 steps, {tuned_changed}/{} query tensors moved, paper-preset learnable share <= {:.4}% (toy {:.2}%)",
        frozen_changed,
        learnable.len(),
        100.0 * worst_share,
        100.0 * toy_share
    );
    report(9, "prompt-mask contract", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c10_trivial_invariants() {
    let dev = Device::Cpu;
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let table = Tensor::randn(0f32, 1.0, (84, 84, 8), &dev).unwrap();
    let pos_ok = [PosInterp::Bilinear, PosInterp::Bicubic].iter().all(|&m| {
        let out = interpolate_pos_embed(&table, (84, 84), m).unwrap();
        out.flatten_all().unwrap().to_vec1::<f32>().unwrap() == table.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    });
    checks.push(("positional identity", pos_ok));

    let anchors = Tensor::new(&[[0.2f64, 0.8], [0.5, 0.5], [0.9, 0.1]], &dev).unwrap();
    let boxes = bbox_from_logits(&Tensor::zeros((3, 4), DType::F64, &dev).unwrap(), &anchors).unwrap().to_vec2::<f64>().unwrap();
    let bbox_ok = boxes
        .iter()
        .zip([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]])
        .all(|(b, a)| (b[0] - a[0]).abs() < 1e-12 && (b[1] - a[1]).abs() < 1e-12 && b[2] == 0.5 && b[3] == 0.5);
    checks.push(("bbox zero-offset", bbox_ok));

    let run = common::toy_run(2);
    let interp = run.model.interpreter_for("syn_reid").unwrap();
    let q = Tensor::randn(0f32, 1.0, (2, 3, 64), &dev).unwrap();
    let y = interp.feature_unit(&q).unwrap();
    checks.push(("feature identity", y.to_vec3::<f32>().unwrap() == q.to_vec3::<f32>().unwrap()));

    let target = Tensor::new(&[[[[1f64, 0.0], [0.0, 1.0]], [[0.0, 0.0], [1.0, 1.0]]]], &dev).unwrap();
    let logits = ((&target * 80.0).unwrap() - 40.0).unwrap();
    let smooth = 1.0;
    let dice = dice_loss(&logits, &target, None, smooth).unwrap().to_scalar::<f64>().unwrap();
    checks.push(("dice perfect", (0.0..=smooth / (2.0 * 2.0 + smooth)).contains(&dice) && dice < 1e-12));
    let g = [[0.3, 0.4, 0.2, 0.1], [0.7, 0.5, 0.6, 0.3]].iter().all(|b| (1.0 - giou(b, b)).abs() < 1e-12);
    checks.push(("giou perfect", g));
    let y01 = Tensor::new(&[1f64, 0.0, 0.0, 1.0], &dev).unwrap();
    let focal = focal_loss(&y01, &y01, 0.25, 2.0).unwrap().to_scalar::<f64>().unwrap();
    checks.push(("focal perfect", (0.0..1e-12).contains(&focal)));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    save_checkpoint(&path, &run.model, Some(&run.plan), 7, 0, None).unwrap();
    let restored = load_checkpoint(&path).unwrap().to_model().unwrap();
    let params_ok = run.model.store().iter().all(|(n, _)| {
        let a = run.model.store().values_f32(n).unwrap();
        let b = restored.store().values_f32(n).unwrap();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let mut outputs_ok = true;
    for ds in &run.datasets {
        let patch = run.model.config().encoder.patch_size;
        let (images, _) = ds.batch(&[0, 1], patch, DType::F32).unwrap();
        let a = run.model.forward(&ds.task_id, &images, &ForwardMode::eval(), None).unwrap();
        let b = restored.forward(&ds.task_id, &images, &ForwardMode::eval(), None).unwrap();
        for (x, y) in [(&a.units[0].y_f, &b.units[0].y_f), (&a.units[0].y_p, &b.units[0].y_p), (&a.units[0].y_m, &b.units[0].y_m), (&a.units[0].y_bbox, &b.units[0].y_bbox)] {
            if let (Some(x), Some(y)) = (x, y) {
                let x = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                let y = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                outputs_ok &= x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits());
            }
        }
    }
    checks.push(("checkpoint round-trip", params_ok && outputs_ok));

    let pass = checks.iter().all(|c| c.1);
    let detail = checks.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "broken" })).collect::<Vec<_>>().join(", ");
    report(10, "trivial invariants", pass, &detail);
    assert!(pass, "{detail}");
}
