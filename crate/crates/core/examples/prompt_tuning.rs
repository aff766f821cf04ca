//! Prompt tuning: jointly train the toy model, then adapt it to a new pose
//! dataset by learning only that dataset's queries. Everything else stays
//! bit-identical.
//!
//! `cargo run --release --example prompt_tuning -- [joint_steps] [tune_steps]`

use std::path::Path;

use candle_core::DType;
use unihcp::config::{prepare_data, prepare_run, RunConfig};
use unihcp::metrics::evaluate_dataset;
use unihcp::scenegen::{DataFormat, DatasetEntry};
use unihcp::task::TaskType;
use unihcp::trainer::{trainable_mask_report, store_specs, MaskMode, Model, Trainer};

fn main() -> unihcp::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let joint_steps = args.first().copied().unwrap_or(300);
    let tune_steps = args.get(1).copied().unwrap_or(200);

    let mut cfg = RunConfig::toy_joint(16, 0);
    cfg.train.total_steps = Some(joint_steps);
    let run = prepare_run(&cfg, Path::new("."), DType::F32)?;
    let mut trainer = Trainer::new(run.model, run.plan, &[])?;
    trainer.run(&run.datasets, joint_steps, None, |_| {})?;
    let base = trainer.into_model();
    println!("joint training: {joint_steps} steps");

    let mut tune = RunConfig::toy_joint(16, 0);
    tune.datasets = vec![DatasetEntry {
        id: "new_pose".into(),
        task_type: TaskType::Pose,
        format: DataFormat::Synthetic,
        root: Default::default(),
        split: "train".into(),
        batch_size: 8,
        samples: Some(16),
        seed: Some(99),
    }];
    tune.train.total_steps = Some(tune_steps);
    tune.train.mask_mode = Some(MaskMode::PromptQueries);
    let data = prepare_data(&tune, Path::new("."))?;
    let mut tasks = base.tasks().to_vec();
    tasks.extend(data.tasks.iter().cloned());
    let mut model = Model::build(base.config(), &tasks, base.mode(), 1, DType::F32)?;
    for (task, n) in base.id_classifier_sizes() {
        model.add_id_classifier(&task, n, 0)?;
    }
    for (name, var) in base.store().iter() {
        model.store().set(name, var.as_tensor())?;
    }

    let target = vec!["new_pose".to_string()];
    let before = evaluate_dataset(&model, &data.datasets[0], 8)?;
    let mut trainer = Trainer::new(model, tune.plan(), &target)?;
    let frozen: Vec<(String, Vec<f32>)> = trainer
        .model()
        .store()
        .iter()
        .filter(|(n, _)| !trainer.mask().contains(n))
        .map(|(n, _)| Ok((n.to_string(), trainer.model().store().values_f32(n)?)))
        .collect::<unihcp::Result<_>>()?;
    trainer.run(&data.datasets, tune_steps, None, |_| {})?;
    let after = evaluate_dataset(trainer.model(), &data.datasets[0], 8)?;
    let unchanged = frozen
        .iter()
        .all(|(n, v)| trainer.model().store().values_f32(n).map(|w| w.iter().zip(v).all(|(a, b)| a.to_bits() == b.to_bits())).unwrap_or(false));
    let share = trainable_mask_report(&store_specs(trainer.model().store()), trainer.mask());
    println!("learnable {} of {} parameters ({:.3}%)", share.learnable, share.total, 100.0 * share.ratio);
    println!("frozen parameters bit-identical: {unchanged}");
    println!("new_pose before tuning {:?}", before.metrics);
    println!("new_pose after  tuning {:?}", after.metrics);
    Ok(())
}
