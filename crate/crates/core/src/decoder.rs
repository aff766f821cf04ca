//! Task-specific queries and the query decoder.
//!
//! Each block runs cross-attention (queries attend to encoder tokens), then
//! self-attention among queries, then an FFN, all pre-norm with residuals.
//! The query positional embedding is computed once per forward pass and
//! reused by every block.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::PatchTokens;
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, key_bias_from_valid, Activation, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{Decl, Init, Scope};
use crate::task::{TaskDescriptor, TaskType};

const SINE_TEMPERATURE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Channel count of the encoder tokens projected by `input_proj`.
    pub encoder_width: usize,
    /// One coordinate projector shared by token and anchor embeddings; when
    /// false each detection task owns its anchor projector.
    #[serde(default = "default_true")]
    pub share_coord_proj: bool,
}

fn default_true() -> bool {
    true
}

impl DecoderConfig {
    pub fn paper() -> Self {
        DecoderConfig {
            depth: 9,
            width: 256,
            heads: 8,
            ffn_hidden: 2048,
            encoder_width: 768,
            share_coord_proj: true,
        }
    }

    pub fn toy() -> Self {
        DecoderConfig {
            depth: 2,
            width: 64,
            heads: 4,
            ffn_hidden: 256,
            encoder_width: 64,
            share_coord_proj: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("decoder needs at least one block"));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width % 2 != 0 {
            return Err(Error::config("decoder width must be even for sine encoding"));
        }
        Ok(())
    }
}

/// `n` anchor points drawn i.i.d. uniformly from the open unit square.
pub fn init_anchor_points<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<[f64; 2]>> {
    if n == 0 {
        return Err(Error::config("anchor count must be at least 1"));
    }
    let mut draw = || loop {
        let v: f64 = rng.random();
        if v > 0.0 {
            break v;
        }
    };
    Ok((0..n).map(|_| [draw(), draw()]).collect())
}

/// Normalized patch-center coordinates in row-major order: `(x, y)` =
/// `((j + 0.5) / W_F, (i + 0.5) / H_F)`.
pub fn feature_token_coords(h_f: usize, w_f: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(h_f * w_f);
    for i in 0..h_f {
        for j in 0..w_f {
            out.push([(j as f64 + 0.5) / w_f as f64, (i as f64 + 0.5) / h_f as f64]);
        }
    }
    out
}

/// Token centers normalized by each image's original (unpadded) size,
/// clamped to `[0, 1]`. Returns `[B, H_F * W_F, 2]`. Without padding this
/// equals [`feature_token_coords`] for every image.
pub fn token_coords(tokens: &PatchTokens) -> Result<Tensor> {
    let (h_f, w_f) = tokens.grid();
    let p = tokens.patch_size as f64;
    let mut v = Vec::with_capacity(tokens.batch() * h_f * w_f * 2);
    for &(oh, ow) in &tokens.orig_sizes {
        for i in 0..h_f {
            for j in 0..w_f {
                v.push(((j as f64 + 0.5) * p / ow as f64).min(1.0));
                v.push(((i as f64 + 0.5) * p / oh as f64).min(1.0));
            }
        }
    }
    Ok(Tensor::from_vec(v, (tokens.batch(), h_f * w_f, 2), &Device::Cpu)?
        .to_dtype(tokens.tokens.dtype())?)
}

/// Sine-cosine encoding of `[..., 2]` coordinates into `[..., width]`:
/// `width / 2` features per axis, x first. Feature `k` of an axis with value
/// `c` is `sin(2πc / T^(2⌊k/2⌋/F))` for even `k` and the cosine for odd `k`.
pub fn sine_encode(coords: &Tensor, width: usize) -> Result<Tensor> {
    let f = width / 2;
    let dtype = coords.dtype();
    let dev = coords.device();
    let freqs: Vec<f64> = (0..f)
        .map(|k| 2.0 * PI / SINE_TEMPERATURE.powf(2.0 * (k / 2) as f64 / f as f64))
        .collect();
    let even: Vec<f64> = (0..f).map(|k| if k % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let odd: Vec<f64> = even.iter().map(|e| 1.0 - e).collect();
    let to_t = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, f, dev)?.to_dtype(dtype)?) };
    let (freqs, even, odd) = (to_t(freqs)?, to_t(even)?, to_t(odd)?);
    let angles = coords.unsqueeze(coords.rank())?.broadcast_mul(&freqs)?; // [..., 2, F]
    let enc = (angles.sin()?.broadcast_mul(&even)? + angles.cos()?.broadcast_mul(&odd)?)?;
    let mut dims = coords.dims().to_vec();
    *dims.last_mut().unwrap() = width;
    Ok(enc.reshape(dims)?)
}

/// Coordinate → positional-embedding projector: sine encoding then a
/// two-layer MLP.
#[derive(Debug, Clone)]
pub struct CoordProjector {
    mlp: Mlp,
    width: usize,
}

impl CoordProjector {
    pub fn declare(d: &mut Decl, width: usize) {
        Mlp::declare(d, &[width, width, width]);
    }

    pub fn load(s: &Scope, width: usize) -> Result<Self> {
        Ok(CoordProjector {
            mlp: Mlp::load(s, &[width, width, width], Activation::Relu)?,
            width,
        })
    }

    pub fn forward(&self, coords: &Tensor) -> Result<Tensor> {
        self.mlp.forward(&sine_encode(coords, self.width)?)
    }
}

#[derive(Debug, Clone)]
pub enum QueryPosition {
    /// Learned positional embedding `[N, C]`.
    Learned(Tensor),
    /// Learnable anchor points `[N, 2]` in the open unit square.
    Anchors(Tensor),
}

/// Learnable queries of one task, stored under `queries.{task_id}`.
#[derive(Debug, Clone)]
pub struct TaskQuerySet {
    pub desc: TaskDescriptor,
    pub content: Tensor,
    pub position: QueryPosition,
    own_projector: Option<CoordProjector>,
    /// Deep prompt tokens, one `[P, C]` tensor per decoder block.
    pub prompts: Vec<Tensor>,
}

impl TaskQuerySet {
    pub fn declare(desc: &TaskDescriptor, cfg: &DecoderConfig, d: &mut Decl) {
        let (n, c) = (desc.num_queries, cfg.width);
        d.add("content", &[n, c], Init::Normal(0.02));
        if desc.task_type == TaskType::PedDet {
            d.add("anchors", &[n, 2], Init::Uniform(0.0, 1.0));
            if !cfg.share_coord_proj {
                CoordProjector::declare(&mut d.pp("coord_mlp"), c);
            }
        } else {
            d.add("pos", &[n, c], Init::Normal(0.02));
        }
        if desc.deep_prompt_tokens > 0 {
            for i in 0..cfg.depth {
                d.add(
                    &format!("prompt{i}"),
                    &[desc.deep_prompt_tokens, c],
                    Init::Normal(0.02),
                );
            }
        }
    }

    pub fn load(desc: &TaskDescriptor, cfg: &DecoderConfig, s: &Scope) -> Result<Self> {
        desc.validate()?;
        let (n, c) = (desc.num_queries, cfg.width);
        let (position, own_projector) = if desc.task_type == TaskType::PedDet {
            let proj = if cfg.share_coord_proj {
                None
            } else {
                Some(CoordProjector::load(&s.pp("coord_mlp"), c)?)
            };
            (QueryPosition::Anchors(s.get("anchors", &[n, 2])?), proj)
        } else {
            (QueryPosition::Learned(s.get("pos", &[n, c])?), None)
        };
        let prompts = if desc.deep_prompt_tokens > 0 {
            (0..cfg.depth)
                .map(|i| s.get(&format!("prompt{i}"), &[desc.deep_prompt_tokens, c]))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(TaskQuerySet {
            desc: desc.clone(),
            content: s.get("content", &[n, c])?,
            position,
            own_projector,
            prompts,
        })
    }

    pub fn anchors(&self) -> Option<&Tensor> {
        match &self.position {
            QueryPosition::Anchors(a) => Some(a),
            QueryPosition::Learned(_) => None,
        }
    }

    /// `Q_p`: the learned embedding, or the projected anchors for detection.
    pub fn positional_embedding(&self, shared: &CoordProjector) -> Result<Tensor> {
        match &self.position {
            QueryPosition::Learned(p) => Ok(p.clone()),
            QueryPosition::Anchors(a) => self.own_projector.as_ref().unwrap_or(shared).forward(a),
        }
    }
}

/// Output of [`QueryDecoder::decode`].
#[derive(Debug, Clone)]
pub struct DecodedQueries {
    /// `L + 1` normalized query states `[B, N, C]`; entry 0 is the input
    /// queries, entry `l` the output of block `l`.
    pub per_layer: Vec<Tensor>,
    /// `[B, H_F * W_F, 2]` token coordinates relative to each original image.
    pub token_coords: Tensor,
    /// The positional embedding `[N, C]` shared by all blocks of this pass.
    pub query_pos: Tensor,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: Mlp,
}

impl DecoderBlock {
    fn declare(d: &mut Decl, cfg: &DecoderConfig) {
        let c = cfg.width;
        LayerNorm::declare(&mut d.pp("norm1"), c);
        MultiHeadAttention::declare(&mut d.pp("cross_attn"), c);
        LayerNorm::declare(&mut d.pp("norm2"), c);
        MultiHeadAttention::declare(&mut d.pp("self_attn"), c);
        LayerNorm::declare(&mut d.pp("norm3"), c);
        Mlp::declare(&mut d.pp("ffn"), &[c, cfg.ffn_hidden, c]);
    }

    fn load(s: &Scope, cfg: &DecoderConfig) -> Result<Self> {
        let c = cfg.width;
        Ok(DecoderBlock {
            norm_cross: LayerNorm::load(&s.pp("norm1"), c)?,
            cross_attn: MultiHeadAttention::load(&s.pp("cross_attn"), c, cfg.heads)?,
            norm_self: LayerNorm::load(&s.pp("norm2"), c)?,
            self_attn: MultiHeadAttention::load(&s.pp("self_attn"), c, cfg.heads)?,
            norm_ffn: LayerNorm::load(&s.pp("norm3"), c)?,
            ffn: Mlp::load(&s.pp("ffn"), &[c, cfg.ffn_hidden, c], Activation::Relu)?,
        })
    }

    fn forward(
        &self,
        q: &Tensor,
        qpos: &Tensor,
        key: &Tensor,
        value: &Tensor,
        bias: &Tensor,
    ) -> Result<Tensor> {
        let h = self.norm_cross.forward(q)?;
        let a = self
            .cross_attn
            .forward(&h.broadcast_add(qpos)?, key, value, Some(bias))?;
        let q = (q + a)?;
        let h = self.norm_self.forward(&q)?;
        let hp = h.broadcast_add(qpos)?;
        let q = (&q + self.self_attn.forward(&hp, &hp, &h, None)?)?;
        let f = self.ffn.forward(&self.norm_ffn.forward(&q)?)?;
        Ok((q + f)?)
    }
}

#[derive(Debug, Clone)]
pub struct QueryDecoder {
    cfg: DecoderConfig,
    input_proj: Linear,
    coord_proj: CoordProjector,
    blocks: Vec<DecoderBlock>,
    norm: LayerNorm,
}

impl QueryDecoder {
    pub fn declare(cfg: &DecoderConfig, d: &mut Decl) {
        Linear::declare(&mut d.pp("input_proj"), cfg.encoder_width, cfg.width);
        CoordProjector::declare(&mut d.pp("coord_mlp"), cfg.width);
        for i in 0..cfg.depth {
            DecoderBlock::declare(&mut d.pp(format!("block{i}")), cfg);
        }
        LayerNorm::declare(&mut d.pp("norm"), cfg.width);
    }

    pub fn load(cfg: &DecoderConfig, s: &Scope) -> Result<Self> {
        cfg.validate()?;
        Ok(QueryDecoder {
            cfg: cfg.clone(),
            input_proj: Linear::load(&s.pp("input_proj"), cfg.encoder_width, cfg.width)?,
            coord_proj: CoordProjector::load(&s.pp("coord_mlp"), cfg.width)?,
            blocks: (0..cfg.depth)
                .map(|i| DecoderBlock::load(&s.pp(format!("block{i}")), cfg))
                .collect::<Result<_>>()?,
            norm: LayerNorm::load(&s.pp("norm"), cfg.width)?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn coord_projector(&self) -> &CoordProjector {
        &self.coord_proj
    }

    pub fn decode(&self, queries: &TaskQuerySet, tokens: &PatchTokens) -> Result<DecodedQueries> {
        let c = self.cfg.width;
        if queries.content.dim(1)? != c {
            return Err(Error::config(format!(
                "task `{}` query width {} != decoder width {c}",
                queries.desc.task_id,
                queries.content.dim(1)?
            )));
        }
        if tokens.channels() != self.cfg.encoder_width {
            return Err(Error::config(format!(
                "encoder tokens have {} channels, decoder expects {}",
                tokens.channels(),
                self.cfg.encoder_width
            )));
        }
        let b = tokens.batch();
        let n = queries.desc.num_queries;

        let memory = self.input_proj.forward(&tokens.flat()?)?;
        let coords = token_coords(tokens)?;
        let mem_pos = self.coord_proj.forward(&coords)?;
        let mut key = (&memory + mem_pos)?;
        let mut value = memory;
        let mut valid = tokens.flat_valid()?;
        let query_pos = queries.positional_embedding(&self.coord_proj)?;

        let mut q = queries.content.unsqueeze(0)?.broadcast_as((b, n, c))?.contiguous()?;
        let mut per_layer = Vec::with_capacity(self.cfg.depth + 1);
        per_layer.push(self.norm.forward(&q)?);
        let base_len = key.dim(1)?;
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(prompt) = queries.prompts.get(i) {
                let p = prompt.dim(0)?;
                let pb = prompt.unsqueeze(0)?.broadcast_as((b, p, c))?.contiguous()?;
                key = Tensor::cat(&[&key.narrow(1, 0, base_len)?, &pb], 1)?;
                value = Tensor::cat(&[&value.narrow(1, 0, base_len)?, &pb], 1)?;
                if valid.dim(1)? == base_len {
                    let ones = Tensor::ones((b, p), valid.dtype(), valid.device())?;
                    valid = Tensor::cat(&[&valid, &ones], 1)?;
                }
            }
            let bias = key_bias_from_valid(&valid)?;
            q = block.forward(&q, &query_pos, &key, &value, &bias)?;
            ensure_finite(&q, "decoder block", i)?;
            per_layer.push(self.norm.forward(&q)?);
        }
        Ok(DecodedQueries {
            per_layer,
            token_coords: coords,
            query_pos,
        })
    }
}

/// Convenience for building a dense `[n, 2]` tensor from anchor pairs.
pub fn anchors_tensor(anchors: &[[f64; 2]], dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = anchors.iter().flat_map(|a| a.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (anchors.len(), 2), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, ImageBatch};
    use crate::params::{self, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_init_contract() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = init_anchor_points(1, &mut r1).unwrap();
        assert_eq!(a, init_anchor_points(1, &mut r2).unwrap());
        assert!(a[0].iter().all(|&v| v > 0.0 && v < 1.0));
        let big = init_anchor_points(10_000, &mut r1).unwrap();
        for axis in 0..2 {
            let m = big.iter().map(|p| p[axis]).sum::<f64>() / big.len() as f64;
            assert!((m - 0.5).abs() < 0.02, "mean {m}");
        }
        assert!(init_anchor_points(0, &mut r1).is_err());
    }

    #[test]
    fn token_coordinate_centers() {
        assert_eq!(feature_token_coords(1, 1), vec![[0.5, 0.5]]);
        assert_eq!(
            feature_token_coords(2, 2),
            vec![[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]]
        );
        let c = feature_token_coords(16, 12);
        assert_eq!(c.len(), 192);
        assert!(c.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sine_encoding_at_origin() {
        let coords = Tensor::new(&[[0.0f64, 0.0]], &Device::Cpu).unwrap();
        let e = sine_encode(&coords, 8).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(&e[0][0..2], &[0.0, 1.0]);
        assert_eq!(&e[0][4..6], &[0.0, 1.0]);
    }

    fn toy_decoder() -> (ParamStore, QueryDecoder, TaskQuerySet, TaskQuerySet) {
        let cfg = DecoderConfig::toy();
        let seg = TaskDescriptor::new("seg", TaskType::Seg, 5);
        let det = TaskDescriptor::new("det", TaskType::PedDet, 4);
        let mut specs = Vec::new();
        let mut d = Decl::root(&mut specs);
        QueryDecoder::declare(&cfg, &mut d.pp("decoder"));
        TaskQuerySet::declare(&seg, &cfg, &mut d.pp("queries.seg"));
        TaskQuerySet::declare(&det, &cfg, &mut d.pp("queries.det"));
        let store = ParamStore::materialize(&specs, 9, DType::F64).unwrap();
        let s = Scope::root(&store);
        let dec = QueryDecoder::load(&cfg, &s.pp("decoder")).unwrap();
        let qs = TaskQuerySet::load(&seg, &cfg, &s.pp("queries.seg")).unwrap();
        let qd = TaskQuerySet::load(&det, &cfg, &s.pp("queries.det")).unwrap();
        (store, dec, qs, qd)
    }

    fn tokens(valid_cols: usize) -> PatchTokens {
        let dev = Device::Cpu;
        let t = Tensor::randn(0f64, 1.0, (1, 3, 4, 64), &dev).unwrap();
        let mut v = vec![0f64; 12];
        for i in 0..3 {
            for j in 0..valid_cols {
                v[i * 4 + j] = 1.0;
            }
        }
        PatchTokens {
            tokens: t,
            valid: Tensor::from_vec(v, (1, 3, 4), &dev).unwrap(),
            patch_size: 8,
            orig_sizes: vec![(24, 32)],
        }
    }

    #[test]
    fn decode_returns_all_layers() {
        let (_s, dec, qs, qd) = toy_decoder();
        let t = tokens(4);
        let out = dec.decode(&qs, &t).unwrap();
        assert_eq!(out.per_layer.len(), 3);
        for l in &out.per_layer {
            assert_eq!(l.dims(), &[1, 5, 64]);
        }
        let out = dec.decode(&qd, &t).unwrap();
        assert_eq!(out.per_layer[2].dims(), &[1, 4, 64]);
        // anchors determine Q_p deterministically
        let again = dec.decode(&qd, &t).unwrap();
        assert_eq!(
            out.query_pos.to_vec2::<f64>().unwrap(),
            again.query_pos.to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn masked_tokens_do_not_influence_queries() {
        let (_s, dec, qs, _) = toy_decoder();
        let t = tokens(3);
        let a = dec.decode(&qs, &t).unwrap();
        let mut t2 = t.clone();
        let noise = Tensor::full(50f64, (1, 3, 1, 64), &Device::Cpu).unwrap();
        t2.tokens = t
            .tokens
            .slice_assign(&[0..1, 0..3, 3..4, 0..64], &noise)
            .unwrap();
        let b = dec.decode(&qs, &t2).unwrap();
        for (x, y) in a.per_layer.iter().zip(&b.per_layer) {
            let x = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let y = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (u, v) in x.iter().zip(&y) {
                assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0));
            }
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let (_s, dec, qs, _) = toy_decoder();
        let mut t = tokens(4);
        t.tokens = Tensor::zeros((1, 3, 4, 32), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(dec.decode(&qs, &t), Err(Error::Config(_))));
    }

    #[test]
    fn paper_decoder_parameter_count() {
        let mut specs = Vec::new();
        QueryDecoder::declare(&DecoderConfig::paper(), &mut Decl::root(&mut specs).pp("decoder"));
        let n = params::count(&specs) as f64;
        assert!((n - 14.5e6).abs() / 14.5e6 <= 0.03, "decoder params {n}");
    }

    #[test]
    fn decode_through_encoder_tokens() {
        let ecfg = EncoderConfig::toy();
        let mut specs = Vec::new();
        crate::encoder::Encoder::declare(&ecfg, &mut Decl::root(&mut specs).pp("encoder"));
        let store = ParamStore::materialize(&specs, 1, DType::F64).unwrap();
        let enc = crate::encoder::Encoder::load(&ecfg, &Scope::root(&store).pp("encoder")).unwrap();
        let img = image::RgbImage::from_pixel(24, 32, image::Rgb([1, 2, 3]));
        let batch = ImageBatch::from_images(&[&img], 8, DType::F64).unwrap();
        let toks = enc.forward(&batch, &crate::encoder::ForwardMode::eval()).unwrap();
        let (_s, dec, qs, _) = toy_decoder();
        let out = dec.decode(&qs, &toks).unwrap();
        assert_eq!(out.token_coords.dims(), &[1, 12, 2]);
    }
}
