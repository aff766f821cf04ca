//! Task-agnostic plain ViT encoder with a shared, spatially interpolated
//! positional embedding.

use candle_core::{DType, Device, Tensor, D};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, key_bias_from_valid, Activation, LayerNorm, Linear, Mlp};
use crate::params::{Decl, Init, Scope};

const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PosInterp {
    /// Corner-aligned bilinear interpolation.
    #[default]
    Bilinear,
    /// Corner-aligned bicubic (Keys, a = -0.75) with clamped borders.
    Bicubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub ffn_hidden: usize,
    pub pos_grid: usize,
    pub drop_path_rate: f64,
    #[serde(default)]
    pub pos_interp: PosInterp,
}

impl EncoderConfig {
    /// ViT-B/16 with an 84x84 positional table.
    pub fn paper() -> Self {
        EncoderConfig {
            depth: 12,
            width: 768,
            heads: 12,
            patch_size: 16,
            ffn_hidden: 4 * 768,
            pos_grid: 84,
            drop_path_rate: 0.2,
            pos_interp: PosInterp::Bilinear,
        }
    }

    pub fn toy() -> Self {
        EncoderConfig {
            depth: 2,
            width: 64,
            heads: 4,
            patch_size: 8,
            ffn_hidden: 4 * 64,
            pos_grid: 16,
            drop_path_rate: 0.0,
            pos_interp: PosInterp::Bilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.patch_size == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config("drop_path_rate must lie in [0, 1)"));
        }
        if self.pos_grid == 0 {
            return Err(Error::config("pos_grid must be positive"));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Padded batch of images. `pixels` is `[B, H, W, 3]`, `pad_mask` is
/// `[B, H, W]` with 1 on valid pixels and 0 on padding.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub pad_mask: Tensor,
    pub orig_sizes: Vec<(usize, usize)>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, pad_mask: Tensor, orig_sizes: Vec<(usize, usize)>) -> Result<Self> {
        let (b, h, w, c) = pixels.dims4()?;
        if c != 3 {
            return Err(Error::shape("image batch", format!("expected 3 channels, got {c}")));
        }
        if pad_mask.dims() != [b, h, w] {
            return Err(Error::shape(
                "image batch",
                format!("pad mask {:?} vs pixels {:?}", pad_mask.dims(), pixels.dims()),
            ));
        }
        if orig_sizes.len() != b {
            return Err(Error::shape("image batch", "one original size per image"));
        }
        let per_image = pad_mask
            .to_dtype(DType::F64)?
            .flatten_from(1)?
            .max(1)?
            .to_vec1::<f64>()?;
        if per_image.iter().any(|&m| m <= 0.0) {
            return Err(Error::config("every image needs at least one valid pixel"));
        }
        Ok(ImageBatch {
            pixels,
            pad_mask,
            orig_sizes,
        })
    }

    /// Normalizes and pads `images` to a common size rounded up to a
    /// multiple of `patch_size`.
    pub fn from_images(images: &[&RgbImage], patch_size: usize, dtype: DType) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::config("empty image batch"));
        }
        let round = |v: u32| (v as usize).div_ceil(patch_size) * patch_size;
        let h = images.iter().map(|i| round(i.height())).max().unwrap();
        let w = images.iter().map(|i| round(i.width())).max().unwrap();
        let b = images.len();
        let mut px = vec![0f32; b * h * w * 3];
        let mut mask = vec![0f32; b * h * w];
        for (n, img) in images.iter().enumerate() {
            for (x, y, p) in img.enumerate_pixels() {
                let (x, y) = (x as usize, y as usize);
                let base = (n * h + y) * w + x;
                mask[base] = 1.0;
                for c in 0..3 {
                    px[base * 3 + c] = (p[c] as f32 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
                }
            }
        }
        let dev = Device::Cpu;
        let pixels = Tensor::from_vec(px, (b, h, w, 3), &dev)?.to_dtype(dtype)?;
        let pad_mask = Tensor::from_vec(mask, (b, h, w), &dev)?.to_dtype(dtype)?;
        let sizes = images
            .iter()
            .map(|i| (i.height() as usize, i.width() as usize))
            .collect();
        ImageBatch::new(pixels, pad_mask, sizes)
    }

    pub fn len(&self) -> usize {
        self.orig_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orig_sizes.is_empty()
    }

    pub fn hw(&self) -> (usize, usize) {
        let d = self.pixels.dims();
        (d[1], d[2])
    }

    /// Images `range` of this batch.
    pub fn slice(&self, start: usize, len: usize) -> Result<ImageBatch> {
        Ok(ImageBatch {
            pixels: self.pixels.narrow(0, start, len)?,
            pad_mask: self.pad_mask.narrow(0, start, len)?,
            orig_sizes: self.orig_sizes[start..start + len].to_vec(),
        })
    }
}

/// Encoder token grid. `tokens` is `[B, H_F, W_F, C]`, `valid` `[B, H_F, W_F]`.
#[derive(Debug, Clone)]
pub struct PatchTokens {
    pub tokens: Tensor,
    pub valid: Tensor,
    pub patch_size: usize,
    pub orig_sizes: Vec<(usize, usize)>,
}

impl PatchTokens {
    pub fn grid(&self) -> (usize, usize) {
        let d = self.valid.dims();
        (d[1], d[2])
    }

    pub fn batch(&self) -> usize {
        self.valid.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.tokens.dims()[3]
    }

    /// Tokens flattened to `[B, H_F * W_F, C]`.
    pub fn flat(&self) -> Result<Tensor> {
        let (b, h, w, c) = self.tokens.dims4()?;
        Ok(self.tokens.reshape((b, h * w, c))?)
    }

    pub fn flat_valid(&self) -> Result<Tensor> {
        let (b, h, w) = self.valid.dims3()?;
        Ok(self.valid.reshape((b, h * w))?)
    }
}

/// Splits a padded batch into non-overlapping patches.
///
/// Returns `[B, H_F, W_F, p*p*3]` raw patches (padding zeroed) and the
/// `[B, H_F, W_F]` token validity (valid iff any covered pixel is valid).
pub fn patch_grid(batch: &ImageBatch, patch: usize) -> Result<(Tensor, Tensor)> {
    let (b, h, w, _) = batch.pixels.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (hf, wf) = (h / patch, w / patch);
    let masked = batch
        .pixels
        .broadcast_mul(&batch.pad_mask.unsqueeze(3)?)?;
    let patches = masked
        .reshape(vec![b, hf, patch, wf, patch, 3])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b, hf, wf, patch * patch * 3))?;
    let valid = batch
        .pad_mask
        .reshape((b, hf, patch, wf, patch))?
        .permute((0, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, hf, wf, patch * patch))?
        .max(D::Minus1)?;
    Ok((patches, valid))
}

/// Row-major `[dst, src]` resampling matrix with corner-aligned sampling:
/// output index `i` samples source coordinate `i * (src - 1) / (dst - 1)`
/// (coordinate 0 when `dst == 1`).
pub fn interp_matrix(src: usize, dst: usize, mode: PosInterp) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    for i in 0..dst {
        let s = if dst == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        match mode {
            PosInterp::Bilinear => {
                let i0 = (s.floor() as usize).min(src - 1);
                let t = s - i0 as f64;
                if t == 0.0 || i0 + 1 >= src {
                    m[i * src + i0] = 1.0;
                } else {
                    m[i * src + i0] = 1.0 - t;
                    m[i * src + i0 + 1] = t;
                }
            }
            PosInterp::Bicubic => {
                let i0 = s.floor() as isize;
                let t = s - i0 as f64;
                if t == 0.0 {
                    m[i * src + i0 as usize] = 1.0;
                    continue;
                }
                for k in -1..=2isize {
                    let wgt = cubic_weight(t - k as f64);
                    let idx = (i0 + k).clamp(0, src as isize - 1) as usize;
                    m[i * src + idx] += wgt;
                }
            }
        }
    }
    m
}

fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Resamples a `[G, G, C]` positional table to `[h, w, C]`.
pub fn interpolate_pos_embed(
    source: &Tensor,
    target: (usize, usize),
    mode: PosInterp,
) -> Result<Tensor> {
    let (gh, gw, c) = source.dims3()?;
    let (h, w) = target;
    if h == 0 || w == 0 {
        return Err(Error::config(format!("invalid positional target {h}x{w}")));
    }
    if (h, w) == (gh, gw) {
        return Ok(source.clone());
    }
    let dev = source.device();
    let rh = Tensor::from_vec(interp_matrix(gh, h, mode), (h, gh), dev)?.to_dtype(source.dtype())?;
    let rw = Tensor::from_vec(interp_matrix(gw, w, mode), (w, gw), dev)?.to_dtype(source.dtype())?;
    // rows, then columns
    let rows = rh.matmul(&source.reshape((gh, gw * c))?)?.reshape((h, gw, c))?;
    let out = rw.broadcast_matmul(&rows)?; // [h, w, c]
    Ok(out)
}

/// Per-forward training state: drop-path is active only when sample seeds
/// are present (one seed per image, so masks do not depend on batching).
#[derive(Debug, Clone, Default)]
pub struct ForwardMode {
    pub drop_path_seeds: Option<Vec<u64>>,
}

impl ForwardMode {
    pub fn eval() -> Self {
        ForwardMode::default()
    }

    pub fn train(sample_seeds: Vec<u64>) -> Self {
        ForwardMode {
            drop_path_seeds: Some(sample_seeds),
        }
    }

    pub fn is_train(&self) -> bool {
        self.drop_path_seeds.is_some()
    }

    /// Per-sample residual multipliers `[B, 1, 1]` for one residual branch,
    /// or `None` when the branch is always kept.
    fn drop_path_scale(
        &self,
        rate: f64,
        block: usize,
        branch: usize,
        dtype: DType,
    ) -> Result<Option<Tensor>> {
        let Some(seeds) = &self.drop_path_seeds else {
            return Ok(None);
        };
        if rate <= 0.0 {
            return Ok(None);
        }
        let keep = 1.0 - rate;
        let scales: Vec<f64> = seeds
            .iter()
            .map(|&s| {
                let u = unit_hash(s, block as u64, branch as u64);
                if u < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let n = scales.len();
        Ok(Some(
            Tensor::from_vec(scales, (n, 1, 1), &Device::Cpu)?.to_dtype(dtype)?,
        ))
    }
}

fn unit_hash(a: u64, b: u64, c: u64) -> f64 {
    // splitmix64 over the combined key
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(c.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl EncoderBlock {
    fn declare(d: &mut Decl, cfg: &EncoderConfig) {
        let c = cfg.width;
        LayerNorm::declare(&mut d.pp("norm1"), c);
        Linear::declare(&mut d.pp("attn.qkv"), c, 3 * c);
        Linear::declare(&mut d.pp("attn.proj"), c, c);
        LayerNorm::declare(&mut d.pp("norm2"), c);
        Mlp::declare(&mut d.pp("mlp"), &[c, cfg.ffn_hidden, c]);
    }

    fn load(s: &Scope, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.width;
        Ok(EncoderBlock {
            norm1: LayerNorm::load(&s.pp("norm1"), c)?,
            qkv: Linear::load(&s.pp("attn.qkv"), c, 3 * c)?,
            proj: Linear::load(&s.pp("attn.proj"), c, c)?,
            norm2: LayerNorm::load(&s.pp("norm2"), c)?,
            mlp: Mlp::load(&s.pp("mlp"), &[c, cfg.ffn_hidden, c], Activation::Gelu)?,
            heads: cfg.heads,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        bias: &Tensor,
        keep_attn: Option<&Tensor>,
        keep_mlp: Option<&Tensor>,
    ) -> Result<Tensor> {
        let c = x.dim(2)?;
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?;
        let q = qkv.narrow(2, 0, c)?.contiguous()?;
        let k = qkv.narrow(2, c, c)?.contiguous()?;
        let v = qkv.narrow(2, 2 * c, c)?.contiguous()?;
        let mut a = self
            .proj
            .forward(&crate::nn::attend(&q, &k, &v, self.heads, Some(bias))?)?;
        if let Some(s) = keep_attn {
            a = a.broadcast_mul(s)?;
        }
        let x = (x + a)?;
        let mut m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        if let Some(s) = keep_mlp {
            m = m.broadcast_mul(s)?;
        }
        Ok((x + m)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch_proj: Linear,
    pos_embed: Tensor,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn declare(cfg: &EncoderConfig, d: &mut Decl) {
        let c = cfg.width;
        Linear::declare(&mut d.pp("patch_proj"), cfg.patch_dim(), c);
        d.add("pos_embed", &[cfg.pos_grid, cfg.pos_grid, c], Init::TruncNormal(0.02));
        for i in 0..cfg.depth {
            EncoderBlock::declare(&mut d.pp(format!("block{i}")), cfg);
        }
        LayerNorm::declare(&mut d.pp("norm"), c);
    }

    pub fn load(cfg: &EncoderConfig, s: &Scope) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        Ok(Encoder {
            cfg: cfg.clone(),
            patch_proj: Linear::load(&s.pp("patch_proj"), cfg.patch_dim(), c)?,
            pos_embed: s.get("pos_embed", &[cfg.pos_grid, cfg.pos_grid, c])?,
            blocks: (0..cfg.depth)
                .map(|i| EncoderBlock::load(&s.pp(format!("block{i}")), cfg))
                .collect::<Result<_>>()?,
            norm: LayerNorm::load(&s.pp("norm"), c)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Patch projection without positional information.
    pub fn patchify(&self, batch: &ImageBatch) -> Result<PatchTokens> {
        let (patches, valid) = patch_grid(batch, self.cfg.patch_size)?;
        let (_, hf, wf) = valid.dims3()?;
        if hf > self.cfg.pos_grid || wf > self.cfg.pos_grid {
            return Err(Error::config(format!(
                "token grid {hf}x{wf} exceeds positional table {0}x{0}",
                self.cfg.pos_grid
            )));
        }
        Ok(PatchTokens {
            tokens: self.patch_proj.forward(&patches)?,
            valid,
            patch_size: self.cfg.patch_size,
            orig_sizes: batch.orig_sizes.clone(),
        })
    }

    pub fn forward(&self, batch: &ImageBatch, mode: &ForwardMode) -> Result<PatchTokens> {
        let pt = self.patchify(batch)?;
        let (b, hf, wf, c) = pt.tokens.dims4()?;
        let pos = interpolate_pos_embed(&self.pos_embed, (hf, wf), self.cfg.pos_interp)?
            .reshape((hf * wf, c))?;
        let mut x = pt.flat()?.broadcast_add(&pos)?;
        let bias = key_bias_from_valid(&pt.flat_valid()?)?;
        let dtype = x.dtype();
        for (i, block) in self.blocks.iter().enumerate() {
            let ka = mode.drop_path_scale(self.cfg.drop_path_rate, i, 0, dtype)?;
            let km = mode.drop_path_scale(self.cfg.drop_path_rate, i, 1, dtype)?;
            x = block.forward(&x, &bias, ka.as_ref(), km.as_ref())?;
            ensure_finite(&x, "encoder block", i)?;
        }
        let x = self.norm.forward(&x)?;
        Ok(PatchTokens {
            tokens: x.reshape((b, hf, wf, c))?,
            ..pt
        })
    }
}
