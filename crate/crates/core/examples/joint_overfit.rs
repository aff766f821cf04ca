//! Joint training of the toy model on five small synthetic datasets, with
//! training-set metrics every few hundred steps.
//!
//! `cargo run --release --example joint_overfit -- [steps] [eval_every]`

use std::path::Path;
use std::time::Instant;

use candle_core::DType;
use unihcp::config::{prepare_run, RunConfig};
use unihcp::metrics::evaluate_dataset;
use unihcp::trainer::Trainer;

fn main() -> unihcp::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(3000);
    let every = args.get(1).copied().unwrap_or(500);
    let mut cfg = RunConfig::toy_joint(16, 0);
    cfg.train.total_steps = Some(steps);
    let run = prepare_run(&cfg, Path::new("."), DType::F32)?;
    let mut trainer = Trainer::new(run.model, run.plan, &[])?;
    let start = Instant::now();
    let mut done = 0;
    while done < steps {
        let n = every.min(steps - done);
        trainer.run(&run.datasets, n, None, |m| {
            if m.step % 50 == 0 {
                let per: Vec<String> = m.datasets.iter().map(|(k, d)| format!("{k}={:.4}", d.loss)).collect();
                println!("step {:5} lr {:.2e} total {:.5} | {}", m.step, m.lr, m.total, per.join(" "));
            }
        })?;
        done += n;
        for d in &run.datasets {
            let r = evaluate_dataset(trainer.model(), d, 8)?;
            println!("  [{:.0}s] {} {:?}", start.elapsed().as_secs_f64(), d.id, r.metrics);
        }
    }
    Ok(())
}
