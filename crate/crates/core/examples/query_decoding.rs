//! Task queries through the shared decoder: per-layer query states for
//! every toy task, and the anchor points seeding the detection queries.
//!
//! `cargo run --release --example query_decoding`

use std::path::Path;

use candle_core::DType;
use unihcp::config::{prepare_run, RunConfig};
use unihcp::encoder::ForwardMode;
use unihcp::trainer::DatasetBatch;

fn main() -> unihcp::Result<()> {
    let cfg = RunConfig::toy_joint(4, 0);
    let run = prepare_run(&cfg, Path::new("."), DType::F32)?;
    let patch = run.model.config().encoder.patch_size;
    for ds in &run.datasets {
        let (images, targets) = ds.batch(&[0, 1], patch, DType::F32)?;
        let batch = DatasetBatch { dataset: ds.id.clone(), images, targets };
        let tokens = run.model.encoder().forward(&batch.images, &ForwardMode::eval())?;
        let q = run.model.queries(&ds.task_id)?;
        let decoded = run.model.decoder_for(&ds.task_id)?.decode(q, &tokens)?;
        let shapes: Vec<_> = decoded.per_layer.iter().map(|t| t.dims().to_vec()).collect();
        println!(
            "{:<11} {:<7} {:>3} queries | memory {:?} | states per layer {:?}",
            ds.id,
            ds.task_type.as_str(),
            q.desc.num_queries,
            tokens.tokens.dims(),
            shapes
        );
        if let Some(a) = q.anchors() {
            let pts = a.to_vec2::<f32>()?;
            println!("            first anchors {:?}", &pts[..pts.len().min(4)]);
        }
    }
    Ok(())
}
