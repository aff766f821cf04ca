//! Small differentiable building blocks shared by the encoder, decoder and
//! interpreter. All layers keep their weights as clones of [`ParamStore`]
//! variables, so optimizer updates are visible without rebuilding.
//!
//! [`ParamStore`]: crate::params::ParamStore

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::params::{Decl, Init, Scope};

/// Additive attention bias for masked keys. Large enough that `exp` of it
/// underflows to exactly zero after max-subtraction.
pub const MASK_BIAS: f64 = -1e9;

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn inverse_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fails with [`Error::NonFinite`] if any element is NaN or infinite.
pub fn ensure_finite(t: &Tensor, stage: &'static str, index: usize) -> Result<()> {
    let s = t
        .abs()?
        .flatten_all()?
        .max(0)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage, index })
    }
}

/// Applies a 2-D weight to the last axis of an arbitrary-rank input.
fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let out = w.dim(1)?;
    let y = x.reshape((rows, inner))?.matmul(w)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = out;
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn declare(d: &mut Decl, in_dim: usize, out_dim: usize) {
        d.add(
            "weight",
            &[in_dim, out_dim],
            Init::XavierUniform {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        );
        d.add("bias", &[out_dim], Init::Zeros);
    }

    pub fn load(s: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Linear {
            weight: s.get("weight", &[in_dim, out_dim])?,
            bias: Some(s.get("bias", &[out_dim])?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn declare(d: &mut Decl, dim: usize) {
        d.add("weight", &[dim], Init::Ones);
        d.add("bias", &[dim], Init::Zeros);
    }

    pub fn load(s: &Scope, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: s.get("weight", &[dim])?,
            beta: s.get("bias", &[dim])?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Gelu => x.gelu_erf()?,
        })
    }
}

/// Stack of linear layers with an activation between consecutive layers
/// (none after the last). Layers are named `fc1`, `fc2`, ...
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub fn declare(d: &mut Decl, dims: &[usize]) {
        for (i, w) in dims.windows(2).enumerate() {
            Linear::declare(&mut d.pp(format!("fc{}", i + 1)), w[0], w[1]);
        }
    }

    pub fn load(s: &Scope, dims: &[usize], act: Activation) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::load(&s.pp(format!("fc{}", i + 1)), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = self.act.apply(&h)?;
            }
        }
        Ok(h)
    }
}

/// Scaled dot-product attention over `heads` heads.
///
/// `q`: `[B, Nq, C]`, `k`/`v`: `[B, Nk, C]`, `key_bias`: `[B, Nk]` additive
/// logits bias (0 for valid keys, [`MASK_BIAS`] for masked ones).
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    key_bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, nq, c) = q.dims3()?;
    let nk = k.dim(1)?;
    let hd = c / heads;
    let split = |t: &Tensor, n: usize| -> Result<Tensor> {
        Ok(t.reshape((b, n, heads, hd))?.transpose(1, 2)?.contiguous()?)
    };
    let qh = (split(q, nq)? * (1.0 / (hd as f64).sqrt()))?;
    let kh = split(k, nk)?;
    let vh = split(v, nk)?;
    let mut logits = qh.matmul(&kh.transpose(2, 3)?.contiguous()?)?;
    if let Some(bias) = key_bias {
        logits = logits.broadcast_add(&bias.reshape((b, 1, 1, nk))?)?;
    }
    let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
    let out = attn.matmul(&vh)?;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((b, nq, c))?)
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn declare(d: &mut Decl, dim: usize) {
        for n in ["q", "k", "v", "out"] {
            Linear::declare(&mut d.pp(n), dim, dim);
        }
    }

    pub fn load(s: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::load(&s.pp("q"), dim, dim)?,
            k: Linear::load(&s.pp("k"), dim, dim)?,
            v: Linear::load(&s.pp("v"), dim, dim)?,
            out: Linear::load(&s.pp("out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        key_bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let o = attend(
            &self.q.forward(q)?,
            &self.k.forward(k)?,
            &self.v.forward(v)?,
            self.heads,
            key_bias,
        )?;
        self.out.forward(&o)
    }
}

/// Converts a `[B, N]` 0/1 validity tensor into an additive key bias.
pub fn key_bias_from_valid(valid: &Tensor) -> Result<Tensor> {
    Ok(((valid - 1.0)? * -MASK_BIAS)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Decl, ParamStore};
    use candle_core::Device;

    #[test]
    fn layer_norm_normalizes_last_axis() {
        let mut specs = Vec::new();
        LayerNorm::declare(&mut Decl::root(&mut specs).pp("ln"), 4);
        let store = ParamStore::materialize(&specs, 0, DType::F64).unwrap();
        let ln = LayerNorm::load(&Scope::root(&store).pp("ln"), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 14.0]], &Device::Cpu)
            .unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in y {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let dev = Device::Cpu;
        let q = Tensor::randn(0f64, 1.0, (1, 2, 4), &dev).unwrap();
        let k = Tensor::randn(0f64, 1.0, (1, 3, 4), &dev).unwrap();
        let v = Tensor::randn(0f64, 1.0, (1, 3, 4), &dev).unwrap();
        let valid = Tensor::new(&[[1.0f64, 1.0, 0.0]], &dev).unwrap();
        let bias = key_bias_from_valid(&valid).unwrap();
        let a = attend(&q, &k, &v, 2, Some(&bias)).unwrap();
        // changing the masked value row must not change the output
        let v2 = v
            .slice_assign(&[0..1, 2..3, 0..4], &Tensor::full(1e3f64, (1, 1, 4), &dev).unwrap())
            .unwrap();
        let b = attend(&q, &k, &v2, 2, Some(&bias)).unwrap();
        assert_eq!(a.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn mlp_has_no_trailing_activation() {
        let mut specs = Vec::new();
        Mlp::declare(&mut Decl::root(&mut specs).pp("m"), &[3, 5, 2]);
        assert_eq!(specs.len(), 4);
        let store = ParamStore::materialize(&specs, 3, DType::F64).unwrap();
        let m = Mlp::load(&Scope::root(&store).pp("m"), &[3, 5, 2], Activation::Relu).unwrap();
        // negative outputs are possible only without a final relu
        let x = Tensor::randn(0f64, 3.0, (64, 3), &Device::Cpu).unwrap();
        let y = m.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().any(|&v| v < 0.0));
    }
}
