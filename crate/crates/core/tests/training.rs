//! Trainer and decoder invariants on the toy model.

mod common;

use std::path::Path;

use candle_core::{DType, Tensor};
use unihcp::config::{prepare_run, RunConfig};
use unihcp::decoder::QueryPosition;
use unihcp::encoder::ForwardMode;
use unihcp::task::TaskType;
use unihcp::trainer::{batch_indices, Trainer};

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_f64(a).iter().zip(to_f64(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn detection_micro_batches_match_one_pass() {
    let cfg = RunConfig::toy_joint(8, 3);
    let whole = prepare_run(&cfg, Path::new("."), DType::F64).unwrap();
    let mut split_plan = whole.plan.clone();
    split_plan.det_micro_batches = 2;
    let d = whole.plan.datasets.iter().position(|p| p.task_type == TaskType::PedDet).unwrap();
    assert!(whole.plan.datasets[d].batch_size >= 2);

    let initial = whole.model.deep_clone().unwrap();
    let mut one = Trainer::new(whole.model.deep_clone().unwrap(), whole.plan.clone(), &[]).unwrap();
    let mut two = Trainer::new(whole.model.deep_clone().unwrap(), split_plan, &[]).unwrap();
    let batches: Vec<_> = whole
        .datasets
        .iter()
        .enumerate()
        .map(|(i, ds)| one.next_batch(i, ds).unwrap())
        .collect();
    let m1 = one.train_step(&batches).unwrap();
    let m2 = two.train_step(&batches).unwrap();
    assert!((m1.total - m2.total).abs() <= 1e-9 * m1.total.abs().max(1.0));

    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (name, v0) in initial.store().iter() {
        let p0 = to_f64(v0.as_tensor());
        let a = to_f64(&one.model().store().get(name).unwrap());
        let b = to_f64(&two.model().store().get(name).unwrap());
        for i in 0..p0.len() {
            num = num.max((a[i] - b[i]).abs());
            den = den.max((a[i] - p0[i]).abs());
        }
    }
    assert!(den > 0.0);
    assert!(num / den <= 1e-5, "relative parameter delta {:.3e}", num / den);
}

#[test]
fn permuting_queries_permutes_every_decoder_layer() {
    let run = common::toy_run(4);
    let model = &run.model;
    for path in [TaskType::Pose, TaskType::PedDet] {
        let d = run.datasets.iter().position(|x| x.task_type == path).unwrap();
        let ds = &run.datasets[d];
        let idx = batch_indices(ds, 2, 5, d, 1);
        let (images, _) = ds.batch(&idx, model.config().encoder.patch_size, DType::F32).unwrap();
        let tokens = model.encoder().forward(&images, &ForwardMode::eval()).unwrap();
        let decoder = model.decoder_for(&ds.task_id).unwrap();
        let queries = model.queries(&ds.task_id).unwrap();

        let n = queries.desc.num_queries;
        let perm: Vec<u32> = (0..n as u32).map(|i| (i * 5 + 3) % n as u32).collect();
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..n as u32).collect::<Vec<_>>(), "not a permutation");
        let perm = Tensor::new(perm.as_slice(), &candle_core::Device::Cpu).unwrap();

        let mut shuffled = queries.clone();
        shuffled.content = queries.content.index_select(&perm, 0).unwrap();
        shuffled.position = match &queries.position {
            QueryPosition::Learned(p) => QueryPosition::Learned(p.index_select(&perm, 0).unwrap()),
            QueryPosition::Anchors(a) => QueryPosition::Anchors(a.index_select(&perm, 0).unwrap()),
        };

        let base = decoder.decode(queries, &tokens).unwrap();
        let moved = decoder.decode(&shuffled, &tokens).unwrap();
        assert_eq!(base.per_layer.len(), decoder.config().depth + 1);
        for (l, (x, y)) in base.per_layer.iter().zip(&moved.per_layer).enumerate() {
            let expect = x.index_select(&perm, 1).unwrap();
            let err = max_abs_diff(&expect, y);
            assert!(err <= 1e-5, "{path} layer {l}: {err:.3e}");
        }
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let run_a = common::toy_run(4);
    let run_b = common::toy_run(4);
    let mut a = Trainer::new(run_a.model, run_a.plan, &[]).unwrap();
    let mut b = Trainer::new(run_b.model, run_b.plan, &[]).unwrap();
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    a.run(&run_a.datasets, 3, None, |m| la.push(m.total)).unwrap();
    b.run(&run_b.datasets, 3, None, |m| lb.push(m.total)).unwrap();
    assert_eq!(la, lb);
    for (name, v) in a.model().store().iter() {
        assert_eq!(max_abs_diff(v.as_tensor(), &b.model().store().get(name).unwrap()), 0.0, "{name}");
    }
}

#[test]
fn single_task_loss_decreases() {
    let mut cfg = RunConfig::toy_joint(8, 2);
    cfg.datasets.retain(|e| e.task_type == TaskType::Seg);
    let run = prepare_run(&cfg, Path::new("."), DType::F32).unwrap();
    let mut trainer = Trainer::new(run.model, run.plan, &[]).unwrap();
    let mut losses = Vec::new();
    trainer.run(&run.datasets, 60, None, |m| losses.push(m.total)).unwrap();
    let means: Vec<f64> = losses.chunks(20).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "window means {means:?}");
}
