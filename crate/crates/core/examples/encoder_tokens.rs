//! Patch tokens of the toy encoder for a few synthetic person crops, and
//! the positional table resampled to the resulting grid.
//!
//! `cargo run --release --example encoder_tokens`

use candle_core::DType;
use unihcp::encoder::{interpolate_pos_embed, ForwardMode, ImageBatch};
use unihcp::scenegen::{synthetic_samples, SceneSpec};
use unihcp::task::TaskType;
use unihcp::trainer::{Model, ModelConfig, SharingMode};

fn main() -> unihcp::Result<()> {
    let cfg = ModelConfig::toy();
    let model = Model::build(&cfg, &[], SharingMode::Baseline, 0, DType::F32)?;
    let samples = synthetic_samples(&SceneSpec::toy(3), TaskType::Par, 3, "crops")?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    for (i, img) in images.iter().enumerate() {
        println!("crop {i}: {}x{}", img.width(), img.height());
    }
    let batch = ImageBatch::from_images(&images, cfg.encoder.patch_size, DType::F32)?;
    println!("padded batch {:?}, original sizes {:?}", batch.pixels.dims(), batch.orig_sizes);
    let tokens = model.encoder().forward(&batch, &ForwardMode::eval())?;
    let (h, w) = tokens.grid();
    let valid = tokens.valid.flatten_from(1)?.sum(1)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    println!("tokens {:?} on a {h}x{w} grid, valid per image {valid:?}", tokens.tokens.dims());
    let table = model.store().get("encoder.pos_embed")?;
    let (g, _, c) = table.dims3()?;
    let same = interpolate_pos_embed(&table, (g, g), cfg.encoder.pos_interp)?;
    let diff = (same - &table)?.abs()?.max_all()?.to_scalar::<f32>()?;
    println!("pos table {g}x{g}x{c}; resampling to its own size changes it by {diff}");
    let resized = interpolate_pos_embed(&table, (h, w), cfg.encoder.pos_interp)?;
    println!("resampled to {:?} for this batch", resized.dims());
    Ok(())
}
