//! The optimization recipe: warmup-cosine learning rate, layer-wise decay
//! multipliers and batch-proportional loss weights.
//!
//! `cargo run --release --example schedule_and_weights`

use unihcp::task::TaskType;
use unihcp::trainer::{compute_loss_weights, layer_decay_scale, lr_at, PlanDataset, TrainPlan};

fn main() -> unihcp::Result<()> {
    let datasets = vec![
        PlanDataset::from_nominal("market1501", "market1501", TaskType::Reid, 96, 0.6),
        PlanDataset::from_nominal("pa100k", "pa100k", TaskType::Par, 64, 0.6),
        PlanDataset::from_nominal("lip", "lip", TaskType::Seg, 58, 0.6),
        PlanDataset::from_nominal("coco_pose", "coco_pose", TaskType::Pose, 144, 0.6),
        PlanDataset::from_nominal("crowdhuman", "crowdhuman", TaskType::PedDet, 8, 0.6),
    ];
    let plan = TrainPlan::paper(datasets, 105_000);
    for step in [0, 750, 1500, 3000, 52_500, 104_000, 105_000] {
        println!("lr_at({step:>6}) = {:.6e}", lr_at(step, &plan));
    }
    let depth = 12;
    for name in ["encoder.patch_proj.weight", "encoder.block0.mlp.fc1.weight", "encoder.block11.attn.qkv.weight", "encoder.norm.weight", "decoder.block0.ffn.fc1.weight"] {
        println!("{name:<34} x{:.5}", layer_decay_scale(name, depth, plan.layer_decay)?);
    }
    for (id, w) in compute_loss_weights(&plan)? {
        let d = plan.datasets.iter().find(|d| d.id == id).unwrap();
        println!("{id:<11} b={:<4} w_t={:<7} weight {:.6}", d.batch_size, plan.sample_weights.get(d.task_type), w);
    }
    Ok(())
}
