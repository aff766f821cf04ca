//! Checkpoint round trips, resumption and failure modes.

mod common;

use std::fs;

use candle_core::Tensor;
use unihcp::trainer::{atomic_write, load_checkpoint, save_checkpoint, Model, Trainer};
use unihcp::Error;

fn bits(t: &Tensor) -> Vec<u64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
        .into_iter()
        .map(f64::to_bits)
        .collect()
}

fn same_params(a: &Model, b: &Model) {
    let an: Vec<_> = a.store().names().collect();
    let bn: Vec<_> = b.store().names().collect();
    assert_eq!(an, bn);
    for name in an {
        let x = a.store().get(name).unwrap();
        let y = b.store().get(name).unwrap();
        assert_eq!(x.dims(), y.dims(), "{name}");
        assert!(bits(&x) == bits(&y), "{name} differs");
    }
}

#[test]
fn trained_state_round_trips_and_resumes_identically() {
    let run = common::toy_run(4);
    let datasets = run.datasets;
    let mut trainer = Trainer::new(run.model, run.plan, &[]).unwrap();
    trainer.run(&datasets, 3, None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("step3.safetensors");
    trainer.save(&path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.meta.step, 3);
    assert_eq!(ck.meta.plan.as_ref(), Some(trainer.plan()));

    let state = trainer.optimizer().state_tensors();
    assert!(!state.is_empty());
    assert_eq!(state.len(), ck.optimizer.len());
    for (name, t) in &state {
        assert!(bits(t) == bits(&ck.optimizer[name]), "optimizer slot {name} differs");
    }

    let restored = ck.to_model().unwrap();
    same_params(trainer.model(), &restored);

    let mut resumed = Trainer::new(restored, ck.meta.plan.clone().unwrap(), &[]).unwrap();
    resumed.resume(&ck).unwrap();
    assert_eq!(resumed.step(), 3);
    trainer.run(&datasets, 2, None, |_| {}).unwrap();
    resumed.run(&datasets, 2, None, |_| {}).unwrap();
    same_params(trainer.model(), resumed.model());
}

#[test]
fn interrupted_write_leaves_previous_file_intact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.bin");
    atomic_write(&path, |w| w.write_all(b"committed")).unwrap();

    let r = atomic_write(&path, |w| {
        w.write_all(b"half of a new ")?;
        Err(std::io::Error::other("interrupted"))
    });
    assert!(matches!(r, Err(Error::Io { .. })), "{r:?}");
    assert_eq!(fs::read(&path).unwrap(), b"committed");
    let left: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("state.bin")]);
}

#[test]
fn unreadable_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let missing = load_checkpoint(&dir.path().join("absent.safetensors"));
    assert!(matches!(missing, Err(Error::Io { .. })), "{missing:?}");

    let run = common::toy_run(2);
    let path = dir.path().join("m.safetensors");
    save_checkpoint(&path, &run.model, Some(&run.plan), 0, 0, None).unwrap();
    let bytes = fs::read(&path).unwrap();

    let cut = dir.path().join("cut.safetensors");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let r = load_checkpoint(&cut);
    assert!(matches!(r, Err(Error::Checkpoint(_))), "{r:?}");

    let needle = br#"\"format_version\":1"#;
    let at = bytes.windows(needle.len()).position(|w| w == needle).expect("version in header");
    let mut future = bytes.clone();
    future[at + needle.len() - 1] = b'9';
    let newer = dir.path().join("newer.safetensors");
    fs::write(&newer, &future).unwrap();
    match load_checkpoint(&newer) {
        Err(e @ Error::Checkpoint(_)) => {
            assert!(e.to_string().contains("format version"), "{e}");
            assert!(e.is_validation());
        }
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn applying_to_a_different_model_names_the_mismatch() {
    let run = common::toy_run(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    save_checkpoint(&path, &run.model, None, 0, 0, None).unwrap();
    let ck = load_checkpoint(&path).unwrap();

    let reid = run.model.tasks().iter().find(|t| t.task_type == unihcp::task::TaskType::Reid).unwrap();
    let mut bigger = run.model.deep_clone().unwrap();
    let extra = format!("{}_extra", reid.task_id);
    let mut tasks = bigger.tasks().to_vec();
    let mut desc = reid.clone();
    desc.task_id = extra.clone();
    tasks.push(desc);
    bigger = Model::build(bigger.config(), &tasks, bigger.mode(), 0, candle_core::DType::F32).unwrap();
    for (task, n) in run.model.id_classifier_sizes() {
        bigger.add_id_classifier(&task, n, 0).unwrap();
    }
    bigger.add_id_classifier(&extra, 3, 0).unwrap();

    let err = ck.apply_to(&bigger, |_| false).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert!(err.to_string().contains(&extra), "{err}");
    let prefix_q = format!("queries.{extra}.");
    let prefix_a = format!("aux.{extra}.");
    ck.apply_to(&bigger, |n| n.starts_with(&prefix_q) || n.starts_with(&prefix_a)).unwrap();

    let smaller = Model::build(run.model.config(), &run.model.tasks()[..1], run.model.mode(), 0, candle_core::DType::F32).unwrap();
    let err = ck.apply_to(&smaller, |_| true).unwrap_err();
    assert!(err.to_string().contains("not in model"), "{err}");
}
