//! Checkpoints: save mid-run, restore into a fresh process state, and check
//! that the resumed run matches an uninterrupted one bit for bit.
//!
//! `cargo run --release --example checkpoint_resume`

use std::path::Path;

use candle_core::DType;
use unihcp::config::{prepare_run, RunConfig};
use unihcp::trainer::{load_checkpoint, Trainer};

fn main() -> unihcp::Result<()> {
    let mut cfg = RunConfig::toy_joint(4, 0);
    cfg.train.total_steps = Some(6);
    let dir = tempfile::tempdir().map_err(|e| unihcp::Error::io(".", e))?;
    let path = dir.path().join("mid.safetensors");

    let run = prepare_run(&cfg, Path::new("."), DType::F32)?;
    let mut straight = Trainer::new(run.model, run.plan, &[])?;
    straight.run(&run.datasets, 3, None, |_| {})?;
    straight.save(&path)?;
    straight.run(&run.datasets, 3, None, |_| {})?;

    let ck = load_checkpoint(&path)?;
    println!("checkpoint at step {} with {} parameters, {} optimizer tensors", ck.meta.step, ck.params.len(), ck.optimizer.len());
    let fresh = prepare_run(&cfg, Path::new("."), DType::F32)?;
    let mut resumed = Trainer::new(ck.to_model()?, fresh.plan, &[])?;
    resumed.resume(&ck)?;
    resumed.run(&fresh.datasets, 3, None, |_| {})?;

    let mut differing = 0;
    for (name, _) in straight.model().store().iter() {
        let a = straight.model().store().values_f32(name)?;
        let b = resumed.model().store().values_f32(name)?;
        if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            differing += 1;
        }
    }
    println!("after step {}: {differing} parameters differ between the straight and resumed runs", resumed.step());
    Ok(())
}
