//! Task-guided interpreter: four output units shared by every task, switched
//! on per task type by a fixed gate table.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor, D};

use crate::decoder::{DecodedQueries, TaskQuerySet};
use crate::encoder::PatchTokens;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Activation, LayerNorm, Linear, Mlp};
use crate::params::{Decl, Init, Scope};
use crate::task::TaskType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Unit {
    Feature,
    Global,
    Map,
    BBox,
}

/// Fixed task type → active unit assignment.
pub struct GateTable;

impl GateTable {
    pub fn units(task: TaskType) -> &'static [Unit] {
        match task {
            TaskType::Seg | TaskType::Pose => &[Unit::Global, Unit::Map],
            TaskType::Reid => &[Unit::Feature],
            TaskType::PedDet => &[Unit::Global, Unit::BBox],
            TaskType::Par => &[Unit::Global],
        }
    }

    pub fn is_active(task: TaskType, unit: Unit) -> bool {
        Self::units(task).contains(&unit)
    }
}

/// Outputs for one decoder layer. Every tensor carries a leading batch axis.
#[derive(Debug, Clone, Default)]
pub struct UnitOutputs {
    /// `[B, N, C]` query features.
    pub y_f: Option<Tensor>,
    /// `[B, N, 1]` probabilities.
    pub y_p: Option<Tensor>,
    /// `[B, N, 4·H_F, 4·W_F]` map logits.
    pub y_m: Option<Tensor>,
    /// `[B, N, 4]` boxes as normalized `(cx, cy, h, w)`.
    pub y_bbox: Option<Tensor>,
}

impl UnitOutputs {
    pub fn present(&self) -> Vec<Unit> {
        let mut v = Vec::new();
        if self.y_f.is_some() {
            v.push(Unit::Feature);
        }
        if self.y_p.is_some() {
            v.push(Unit::Global);
        }
        if self.y_m.is_some() {
            v.push(Unit::Map);
        }
        if self.y_bbox.is_some() {
            v.push(Unit::BBox);
        }
        v
    }
}

/// How many times each branch has been evaluated.
#[derive(Debug, Default)]
pub struct EvalCounters {
    pub feature: AtomicUsize,
    pub global: AtomicUsize,
    pub map_features: AtomicUsize,
    pub map: AtomicUsize,
    pub bbox: AtomicUsize,
}

impl EvalCounters {
    pub fn snapshot(&self) -> [usize; 5] {
        [
            self.feature.load(Ordering::Relaxed),
            self.global.load(Ordering::Relaxed),
            self.map_features.load(Ordering::Relaxed),
            self.map.load(Ordering::Relaxed),
            self.bbox.load(Ordering::Relaxed),
        ]
    }
}

/// Transposed convolution with kernel 2 and stride 2 on `[B, H, W, C]`
/// inputs. Weight layout `[in, out, 2, 2]`. Outputs never overlap, so it is
/// a single matmul followed by a pixel shuffle.
#[derive(Debug, Clone)]
pub struct Deconv2x2 {
    weight: Tensor,
    bias: Tensor,
    in_dim: usize,
    out_dim: usize,
}

impl Deconv2x2 {
    pub fn declare(d: &mut Decl, in_dim: usize, out_dim: usize) {
        d.add(
            "weight",
            &[in_dim, out_dim, 2, 2],
            Init::XavierUniform {
                fan_in: in_dim,
                fan_out: out_dim * 4,
            },
        );
        d.add("bias", &[out_dim], Init::Zeros);
    }

    pub fn load(s: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Deconv2x2 {
            weight: s.get("weight", &[in_dim, out_dim, 2, 2])?,
            bias: s.get("bias", &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.in_dim {
            return Err(Error::shape("deconv", format!("{c} channels, expected {}", self.in_dim)));
        }
        let o = self.out_dim;
        let y = x
            .reshape((b * h * w, c))?
            .matmul(&self.weight.reshape((c, o * 4))?)?
            .reshape(vec![b, h, w, o, 2, 2])?
            .permute(vec![0, 1, 4, 2, 5, 3])?
            .contiguous()?
            .reshape((b, 2 * h, 2 * w, o))?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Applies box deltas to anchors: `(σ(α₀ + σ⁻¹(cx)), σ(α₁ + σ⁻¹(cy)),
/// σ(α₂), σ(α₃))`. `alpha`: `[..., N, 4]`, `anchors`: `[N, 2]` strictly
/// inside the unit square.
pub fn bbox_from_logits(alpha: &Tensor, anchors: &Tensor) -> Result<Tensor> {
    let vals = anchors.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(v) = vals.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::Domain(format!(
            "anchor coordinate {v} outside the open unit interval"
        )));
    }
    let logit = (anchors.log()? - (1.0 - anchors)?.log()?)?;
    let center = sigmoid(&alpha.narrow(D::Minus1, 0, 2)?.broadcast_add(&logit)?)?;
    let size = sigmoid(&alpha.narrow(D::Minus1, 2, 2)?)?;
    Ok(Tensor::cat(&[&center, &size], D::Minus1)?)
}

#[derive(Debug)]
pub struct Interpreter {
    global: Linear,
    deconv1: Deconv2x2,
    map_norm: LayerNorm,
    deconv2: Deconv2x2,
    map_mlp: Mlp,
    bbox_mlp: Mlp,
    width: usize,
    pub counters: EvalCounters,
}

impl Clone for Interpreter {
    fn clone(&self) -> Self {
        Interpreter {
            global: self.global.clone(),
            deconv1: self.deconv1.clone(),
            map_norm: self.map_norm.clone(),
            deconv2: self.deconv2.clone(),
            map_mlp: self.map_mlp.clone(),
            bbox_mlp: self.bbox_mlp.clone(),
            width: self.width,
            counters: EvalCounters::default(),
        }
    }
}

impl Interpreter {
    /// `width` is the decoder width C, `enc_width` the encoder width C_e.
    pub fn declare(d: &mut Decl, width: usize, enc_width: usize) {
        Linear::declare(&mut d.pp("global"), width, 1);
        Deconv2x2::declare(&mut d.pp("map.deconv1"), enc_width, enc_width);
        LayerNorm::declare(&mut d.pp("map.norm"), enc_width);
        Deconv2x2::declare(&mut d.pp("map.deconv2"), enc_width, width);
        Mlp::declare(&mut d.pp("map.mlp"), &[width, width, width, width]);
        Mlp::declare(&mut d.pp("bbox.mlp"), &[width, width, width, 4]);
    }

    pub fn load(s: &Scope, width: usize, enc_width: usize) -> Result<Self> {
        Ok(Interpreter {
            global: Linear::load(&s.pp("global"), width, 1)?,
            deconv1: Deconv2x2::load(&s.pp("map.deconv1"), enc_width, enc_width)?,
            map_norm: LayerNorm::load(&s.pp("map.norm"), enc_width)?,
            deconv2: Deconv2x2::load(&s.pp("map.deconv2"), enc_width, width)?,
            map_mlp: Mlp::load(&s.pp("map.mlp"), &[width, width, width, width], Activation::Relu)?,
            bbox_mlp: Mlp::load(&s.pp("bbox.mlp"), &[width, width, width, 4], Activation::Relu)?,
            width,
            counters: EvalCounters::default(),
        })
    }

    pub fn feature_unit(&self, q: &Tensor) -> Result<Tensor> {
        self.counters.feature.fetch_add(1, Ordering::Relaxed);
        Ok(q.clone())
    }

    pub fn global_prob_unit(&self, q: &Tensor) -> Result<Tensor> {
        self.counters.global.fetch_add(1, Ordering::Relaxed);
        sigmoid(&self.global.forward(q)?)
    }

    /// Upsampled token features `[B, 4·H_F, 4·W_F, C]`.
    pub fn map_features(&self, tokens: &PatchTokens) -> Result<Tensor> {
        self.counters.map_features.fetch_add(1, Ordering::Relaxed);
        let h = self.deconv1.forward(&tokens.tokens)?;
        let h = self.map_norm.forward(&h)?.gelu_erf()?;
        self.deconv2.forward(&h)
    }

    /// Dot product of MLP-transformed queries `[B, N, C]` with upsampled
    /// features `[B, H', W', C]`, giving logits `[B, N, H', W']`.
    pub fn local_map_unit(&self, q: &Tensor, features: &Tensor) -> Result<Tensor> {
        self.counters.map.fetch_add(1, Ordering::Relaxed);
        let (b, n, c) = q.dims3()?;
        let (fb, hh, ww, fc) = features.dims4()?;
        if fb != b || fc != c {
            return Err(Error::shape(
                "local map",
                format!("queries {:?} vs features {:?}", q.dims(), features.dims()),
            ));
        }
        let qt = self.map_mlp.forward(q)?;
        let f = features.reshape((b, hh * ww, c))?.transpose(1, 2)?.contiguous()?;
        Ok(qt.matmul(&f)?.reshape((b, n, hh, ww))?)
    }

    pub fn bbox_unit(&self, q: &Tensor, anchors: &Tensor) -> Result<Tensor> {
        self.counters.bbox.fetch_add(1, Ordering::Relaxed);
        bbox_from_logits(&self.bbox_mlp.forward(q)?, anchors)
    }

    /// Runs the gated units on each decoder layer in `layers`.
    pub fn interpret(
        &self,
        decoded: &DecodedQueries,
        tokens: &PatchTokens,
        queries: &TaskQuerySet,
        layers: &[usize],
    ) -> Result<Vec<UnitOutputs>> {
        let task = queries.desc.task_type;
        let units = GateTable::units(task);
        let features = if units.contains(&Unit::Map) {
            let f = self.map_features(tokens)?;
            let (h_f, w_f) = tokens.grid();
            if f.dim(1)? != 4 * h_f || f.dim(2)? != 4 * w_f {
                return Err(Error::shape("local map", "upsampling is not 4x"));
            }
            Some(f)
        } else {
            None
        };
        let anchors = if units.contains(&Unit::BBox) {
            Some(queries.anchors().ok_or_else(|| {
                Error::config(format!("task `{}` has no anchors", queries.desc.task_id))
            })?)
        } else {
            None
        };
        let mut out = Vec::with_capacity(layers.len());
        for &l in layers {
            let q = decoded.per_layer.get(l).ok_or_else(|| {
                Error::config(format!(
                    "layer {l} requested, decoder produced {}",
                    decoded.per_layer.len()
                ))
            })?;
            if q.dim(D::Minus1)? != self.width {
                return Err(Error::shape("interpreter", "query width mismatch"));
            }
            let mut o = UnitOutputs::default();
            for unit in units {
                match unit {
                    Unit::Feature => o.y_f = Some(self.feature_unit(q)?),
                    Unit::Global => o.y_p = Some(self.global_prob_unit(q)?),
                    Unit::Map => {
                        o.y_m = Some(self.local_map_unit(q, features.as_ref().unwrap())?)
                    }
                    Unit::BBox => o.y_bbox = Some(self.bbox_unit(q, anchors.unwrap())?),
                }
            }
            out.push(o);
        }
        Ok(out)
    }
}
