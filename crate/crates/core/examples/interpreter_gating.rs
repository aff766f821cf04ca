//! The gate table in action: each task type gets exactly its output units,
//! and the instrumented counters show the other branches never run.
//!
//! `cargo run --release --example interpreter_gating`

use std::path::Path;

use candle_core::DType;
use unihcp::config::{prepare_run, RunConfig};
use unihcp::encoder::ForwardMode;
use unihcp::interpreter::GateTable;

fn main() -> unihcp::Result<()> {
    let cfg = RunConfig::toy_joint(2, 0);
    let run = prepare_run(&cfg, Path::new("."), DType::F32)?;
    let patch = run.model.config().encoder.patch_size;
    println!("{:<7} {:<36} {:<36} counters [feat glob mapfeat map bbox]", "task", "gate", "emitted");
    for ds in &run.datasets {
        let interp = run.model.interpreter_for(&ds.task_id)?;
        let before = interp.counters.snapshot();
        let (images, _) = ds.batch(&[0], patch, DType::F32)?;
        let out = run.model.forward(&ds.task_id, &images, &ForwardMode::eval(), None)?;
        let after = interp.counters.snapshot();
        let delta: Vec<usize> = after.iter().zip(before).map(|(a, b)| a - b).collect();
        println!(
            "{:<7} {:<36} {:<36} {:?}",
            ds.task_type.as_str(),
            format!("{:?}", GateTable::units(ds.task_type)),
            format!("{:?}", out.units[0].present()),
            delta
        );
    }
    Ok(())
}
