//! Adafactor with first-moment momentum, no relative step size and no
//! parameter scaling. For a parameter `p` with gradient `g` at step `t`:
//!
//! ```text
//! β2_t  = min(1 − t^(−decay_rate), beta2_cap)
//! G     = g² + ε1
//! rank ≥ 2, viewed as [rows, cols] over the last axis:
//!   R ← β2_t R + (1 − β2_t) mean_cols(G)
//!   C ← β2_t C + (1 − β2_t) mean_rows(G)
//!   V = R Cᵀ / mean(R)
//! rank ≤ 1:
//!   V ← β2_t V + (1 − β2_t) G
//! U     = g / √V
//! U     ← U / max(1, RMS(U) / d)
//! m     ← β1 m + (1 − β1) U
//! p     ← p − lr (m + wd · p)
//! ```

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};

use super::plan::OptimizerConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Second {
    Factored { row: Tensor, col: Tensor },
    Full(Tensor),
}

#[derive(Debug, Clone)]
struct Slot {
    m: Tensor,
    second: Second,
}

#[derive(Debug, Clone)]
pub struct Adafactor {
    cfg: OptimizerConfig,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

fn as_matrix(t: &Tensor) -> Result<Tensor> {
    let cols = *t.dims().last().unwrap();
    Ok(t.reshape((t.elem_count() / cols, cols))?)
}

impl Adafactor {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Adafactor {
            cfg,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn beta2(&self, t: u64) -> f64 {
        (1.0 - (t.max(1) as f64).powf(-self.cfg.decay_rate)).min(self.cfg.beta2_cap)
    }

    /// Starts step `t + 1`; returns it.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Applies one update to `var` within the current step.
    pub fn update(&mut self, name: &str, var: &Var, grad: &Tensor, lr: f64, weight_decay: f64) -> Result<()> {
        if self.step == 0 {
            return Err(Error::config("optimizer update outside a step"));
        }
        let p = var.as_tensor();
        if grad.dims() != p.dims() {
            return Err(Error::shape(name, "gradient shape differs from parameter"));
        }
        let g = grad.detach().to_dtype(p.dtype())?;
        let beta2 = self.beta2(self.step);
        let g2 = (g.sqr()? + self.cfg.eps1)?;
        let factored = p.rank() >= 2;
        let slot = match self.slots.remove(name) {
            Some(s) => s,
            None => Slot {
                m: p.zeros_like()?,
                second: if factored {
                    let m = as_matrix(p)?;
                    Second::Factored {
                        row: Tensor::zeros(m.dim(0)?, p.dtype(), p.device())?,
                        col: Tensor::zeros(m.dim(1)?, p.dtype(), p.device())?,
                    }
                } else {
                    Second::Full(p.zeros_like()?)
                },
            },
        };
        // Factored `1/sqrt(v)` as an outer product of per-axis reciprocal
        // roots; forming `v` first underflows in f32 when both factors are
        // near `eps1`.
        let (second, u) = match slot.second {
            Second::Factored { row, col } => {
                let g2m = as_matrix(&g2)?;
                let row = ((row * beta2)? + (g2m.mean(1)? * (1.0 - beta2))?)?;
                let col = ((col * beta2)? + (g2m.mean(0)? * (1.0 - beta2))?)?;
                let r = row.broadcast_div(&row.mean_all()?)?.sqrt()?.recip()?;
                let c = col.sqrt()?.recip()?;
                let inv = r
                    .unsqueeze(1)?
                    .broadcast_mul(&c.unsqueeze(0)?)?
                    .reshape(p.shape())?;
                (Second::Factored { row, col }, (&g * inv)?)
            }
            Second::Full(v) => {
                let v = ((v * beta2)? + (g2 * (1.0 - beta2))?)?;
                let u = (&g / v.sqrt()?)?;
                (Second::Full(v), u)
            }
        };
        let rms = u.sqr()?.mean_all()?.sqrt()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        let u = (u / (rms / self.cfg.clip_threshold).max(1.0))?;
        let m = ((slot.m * self.cfg.beta1)? + (u * (1.0 - self.cfg.beta1))?)?;
        let step = if weight_decay > 0.0 {
            (&m + (p * weight_decay)?)?
        } else {
            m.clone()
        };
        let new = (p - (step * lr)?)?.detach();
        var.set(&new)?;
        self.slots.insert(name.to_string(), Slot { m: m.detach(), second });
        Ok(())
    }

    /// Optimizer state as named tensors for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, s) in &self.slots {
            out.push((format!("{name}#m"), s.m.clone()));
            match &s.second {
                Second::Factored { row, col } => {
                    out.push((format!("{name}#row"), row.clone()));
                    out.push((format!("{name}#col"), col.clone()));
                }
                Second::Full(v) => out.push((format!("{name}#v"), v.clone())),
            }
        }
        out
    }

    /// Restores the state written by [`Adafactor::state_tensors`].
    pub fn load_state(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut slots = BTreeMap::new();
        for (key, m) in tensors {
            let Some(name) = key.strip_suffix("#m") else { continue };
            let get = |suffix: &str| tensors.get(&format!("{name}{suffix}")).cloned();
            let second = match (get("#row"), get("#col"), get("#v")) {
                (Some(row), Some(col), None) => Second::Factored { row, col },
                (None, None, Some(v)) => Second::Full(v),
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "incomplete optimizer state for `{name}`"
                    )))
                }
            };
            slots.insert(name.to_string(), Slot { m: m.clone(), second });
        }
        self.slots = slots;
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn scalar_quadratic_converges() {
        let var = Var::from_tensor(&Tensor::new(&[0f32], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adafactor::new(OptimizerConfig::default());
        for _ in 0..600 {
            opt.begin_step();
            let loss = (var.as_tensor() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let g = grads.get(var.as_tensor()).unwrap().clone();
            opt.update("p", &var, &g, 0.02, 0.0).unwrap();
        }
        let v = var.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!((v - 3.0).abs() < 0.05, "converged to {v}");
    }

    #[test]
    fn first_step_is_clipped_sign_update() {
        // at t = 1, β2 = 0 so V = g² + ε and U = sign(g) with RMS 1
        let var = Var::from_tensor(&Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let g = Tensor::new(&[[1.0f64, -2.0, 4.0], [0.5, -0.25, 8.0]], &Device::Cpu).unwrap();
        let mut opt = Adafactor::new(OptimizerConfig::default());
        assert_eq!(opt.beta2(1), 0.0);
        opt.begin_step();
        opt.update("w", &var, &g, 1.0, 0.0).unwrap();
        let p = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // factored V is the rank-1 product of row and column means, so U is
        // not exactly sign(g); its magnitude is bounded by the clip
        let rms = (p.iter().map(|x| x * x).sum::<f64>() / 6.0).sqrt();
        assert!(rms <= 0.1 * 1.0 + 1e-12);
        for (pi, gi) in p.iter().zip([1.0, -2.0, 4.0, 0.5, -0.25, 8.0]) {
            assert!(pi * gi < 0.0);
        }
    }

    #[test]
    fn zero_gradient_rows_stay_finite_in_f32() {
        let var = Var::from_tensor(&Tensor::ones((3, 4), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let g = Tensor::new(
            &[[0f32, 0., 0., 0.], [0.5, -1.0, 0.0, 2.0], [0.0, 0.0, 0.0, 0.0]],
            &Device::Cpu,
        )
        .unwrap();
        let mut opt = Adafactor::new(OptimizerConfig::default());
        for _ in 0..3 {
            opt.begin_step();
            opt.update("w", &var, &g, 0.1, 0.0).unwrap();
        }
        let p = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(p.iter().all(|v| v.is_finite()), "{p:?}");
        assert_eq!(&p[..4], &[1.0; 4]);
    }

    #[test]
    fn beta2_is_capped() {
        let opt = Adafactor::new(OptimizerConfig::default());
        assert!((opt.beta2(2) - (1.0 - 2f64.powf(-0.8))).abs() < 1e-15);
        assert_eq!(opt.beta2(10_000_000), 0.999);
    }

    #[test]
    fn state_round_trip() {
        let var = Var::from_tensor(&Tensor::ones((2, 2), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let g = Tensor::ones((2, 2), DType::F32, &Device::Cpu).unwrap();
        let mut opt = Adafactor::new(OptimizerConfig::default());
        opt.begin_step();
        opt.update("w", &var, &g, 0.1, 0.05).unwrap();
        let state: BTreeMap<_, _> = opt.state_tensors().into_iter().collect();
        let mut other = Adafactor::new(OptimizerConfig::default());
        other.load_state(1, &state).unwrap();
        assert_eq!(other.state_tensors().len(), 3);
        assert_eq!(other.step_count(), 1);
    }
}
