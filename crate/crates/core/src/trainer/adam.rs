//! Adam with inspectable state, so moments survive a checkpoint round trip.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    lr: f64,
    weight_decay: f64,
    config: AdamConfig,
    step: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, lr: f64, weight_decay: f64, config: AdamConfig) -> Result<Self> {
        let m = params.iter().map(|(_, p)| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = params.iter().map(|(_, p)| p.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            params,
            m,
            v,
            lr,
            weight_decay,
            config,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, p) in &self.params {
            if let Some(g) = grads.get(p) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. Parameters without a gradient keep their value and moments.
    /// With `clip`, gradients are rescaled to at most that global norm.
    pub fn step(&mut self, grads: &GradStore, clip: Option<f64>) -> Result<()> {
        let scale = match clip {
            Some(max) => {
                let norm = self.grad_norm(grads)?;
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p) else { continue };
            let mut g = g.affine(scale, 0.0)?;
            if self.weight_decay > 0.0 {
                g = (g + p.as_tensor().affine(self.weight_decay, 0.0)?)?;
            }
            let m = (self.m[k].affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            let v = (self.v[k].affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, eps)?;
            let update = m.affine(self.lr / bc1, 0.0)?.div(&denom)?;
            p.set(&p.as_tensor().sub(&update)?)?;
            self.m[k] = m;
            self.v[k] = v;
        }
        Ok(())
    }

    /// Moments as `adam.m.<name>` / `adam.v.<name>` tensors.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.params.len());
        for (k, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("adam.m.{name}"), self.m[k].clone()));
            out.push((format!("adam.v.{name}"), self.v[k].clone()));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        for (k, (name, p)) in self.params.iter().enumerate() {
            for (kind, slot) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let key = format!("adam.{kind}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                if t.dims() != p.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has wrong shape")));
                }
                *slot = t.to_dtype(p.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * g / (|g| + eps) ~ lr * sign(g)
        let x = Var::new(&[1.0f32, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], 0.1, 0.0, AdamConfig::default()).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&grads, None).unwrap();
        let v = x.as_tensor().to_vec1::<f32>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn matches_reference_recurrence() {
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let x = Var::new(&[0.5f64], &Device::Cpu).unwrap();
        let cfg = AdamConfig { beta1: b1, beta2: b2, eps };
        let mut opt = Adam::new(vec![("x".into(), x.clone())], lr, 0.0, cfg).unwrap();
        let (mut p, mut m, mut v) = (0.5f64, 0.0, 0.0);
        for t in 1..=5 {
            // f = p^3, g = 3 p^2
            let loss = x.as_tensor().powf(3.0).unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), None).unwrap();
            let g = 3.0 * p * p;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
            let got = x.as_tensor().to_vec1::<f64>().unwrap()[0];
            assert!((got - p).abs() < 1e-12, "step {t}: {got} vs {p}");
        }
    }

    #[test]
    fn clipping_bounds_the_gradient() {
        let x = Var::new(&[3.0f64, 4.0], &Device::Cpu).unwrap();
        let opt = Adam::new(vec![("x".into(), x.clone())], 0.1, 0.0, AdamConfig::default()).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap().affine(0.5, 0.0).unwrap();
        let grads = loss.backward().unwrap();
        assert!((opt.grad_norm(&grads).unwrap() - 5.0).abs() < 1e-12);
    }
}
