//! Parameter accounting at the paper scale: components, task-agnostic
//! share, the four sharing modes and the prompt-tuning masks.
//!
//! `cargo run --release --example param_accounting`

use unihcp::config::{reference_tasks, DEFAULT_DEEP_PROMPT_TOKENS};
use unihcp::trainer::{
    declare_model, trainable_mask_report, MaskMode, ModelConfig, ParamShareReport, SharingMode,
    TrainableMask,
};

fn main() -> unihcp::Result<()> {
    let cfg = ModelConfig::paper();
    let tasks = reference_tasks();
    let specs = declare_model(&cfg, &tasks, SharingMode::Baseline)?;
    let r = ParamShareReport::from_specs(&specs);
    println!("encoder {:.2}M, decoder {:.2}M, interpreter {:.2}M, queries {:.3}M, total {:.2}M",
        r.encoder as f64 / 1e6, r.decoder as f64 / 1e6, r.interpreter as f64 / 1e6, r.queries as f64 / 1e6, r.total as f64 / 1e6);
    println!("task-agnostic share {:.3}%", 100.0 * r.ratio);
    for mode in SharingMode::ALL {
        let r = ParamShareReport::from_specs(&declare_model(&cfg, &tasks, mode)?);
        println!("{:<22} {:>7.2}M  share {:.3}%", mode.as_str(), r.total as f64 / 1e6, 100.0 * r.ratio);
    }
    let target = "coco_pose".to_string();
    for mode in [MaskMode::PromptQueries, MaskMode::PromptDeep] {
        let tuned: Vec<_> = tasks
            .iter()
            .cloned()
            .map(|mut t| {
                if mode == MaskMode::PromptDeep && t.task_id == target {
                    t.deep_prompt_tokens = DEFAULT_DEEP_PROMPT_TOKENS;
                }
                t
            })
            .collect();
        let specs = declare_model(&cfg, &tuned, SharingMode::Baseline)?;
        let mask = TrainableMask::resolve(mode, &specs, &tuned, SharingMode::Baseline, &[target.clone()])?;
        let m = trainable_mask_report(&specs, &mask);
        println!("{:<15} on {target}: {} learnable of {} ({:.4}%)", mode.as_str(), m.learnable, m.total, 100.0 * m.ratio);
    }
    Ok(())
}
