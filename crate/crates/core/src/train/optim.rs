use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adam over every variable of a [`ParamStore`], with moments keyed by
/// parameter name so that state survives a checkpoint round trip.
pub struct Adam {
    pub cfg: AdamConfig,
    pub steps: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in store.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g
                    .to_dtype(DType::F64)?
                    .sqr()?
                    .sum_all()?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Applies one update with learning rate `lr`; returns the gradient norm
    /// before clipping.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<f64> {
        let norm = Self::grad_norm(store, grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.steps as usize,
                detail: format!("gradient norm {norm}"),
            });
        }
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients carry op history back to the variables; without the
            // detach the moments would chain every step's graph together
            let g = (g.detach() * scale)?;
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (
                    ((m * b1)? + (&g * (1.0 - b1))?)?,
                    ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                ),
                None => ((&g * (1.0 - b1))?, (g.sqr()? * (1.0 - b2))?),
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.cfg.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = HashMap::new();
        for (name, (m, v)) in &self.moments {
            map.insert(format!("m.{name}"), m.clone());
            map.insert(format!("v.{name}"), v.clone());
        }
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path, store: &ParamStore, steps: u64) -> Result<()> {
        let map = candle_core::safetensors::load(path, store.device())?;
        self.moments.clear();
        for (name, var) in store.vars() {
            match (map.get(&format!("m.{name}")), map.get(&format!("v.{name}"))) {
                (Some(m), Some(v)) if m.dims() == var.dims() && v.dims() == var.dims() => {
                    self.moments.insert(
                        name.clone(),
                        (m.to_dtype(store.dtype())?, v.to_dtype(store.dtype())?),
                    );
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "{}: optimiser state for {name} is missing or misshapen",
                        path.display()
                    )))
                }
            }
        }
        self.steps = steps;
        Ok(())
    }
}

/// Linear warm-up followed by cosine decay to `min_lr` at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.max_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::nn::Init;

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule {
            max_lr: 1e-3,
            min_lr: 1e-5,
            warmup: 10,
            total: 110,
        };
        assert!((s.lr(0) - 1e-4).abs() < 1e-15);
        assert!((s.lr(9) - 1e-3).abs() < 1e-15);
        assert!((s.lr(10) - 1e-3).abs() < 1e-15);
        assert!((s.lr(60) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-12);
        assert!((s.lr(110) - 1e-5).abs() < 1e-15);
        assert!((s.lr(500) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut ps = ParamStore::new(0, DType::F64);
        let x = ps.param("x", &[3], Init::Normal(2.0)).unwrap();
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], ps.device()).unwrap();
        let mut opt = Adam::new(AdamConfig {
            clip_norm: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let loss = (&x - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&ps, &grads, 1e-2).unwrap();
        }
        let got = x.to_vec1::<f64>().unwrap();
        for (g, t) in got.iter().zip([1.0, -2.0, 0.5]) {
            assert!((g - t).abs() < 1e-3, "{got:?}");
        }
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        // with bias correction, |update| = lr * |g| / (|g| + eps) on step one
        let mut ps = ParamStore::new(0, DType::F64);
        let x = ps.param("x", &[2], Init::Zeros).unwrap();
        let loss = (&x * Tensor::new(&[3.0f64, -0.5], ps.device()).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(AdamConfig {
            clip_norm: 0.0,
            ..AdamConfig::default()
        });
        opt.step(&ps, &grads, 0.1).unwrap();
        let v = x.to_vec1::<f64>().unwrap();
        assert!(
            (v[0] + 0.1).abs() < 1e-8 && (v[1] - 0.1).abs() < 1e-8,
            "{v:?}"
        );
    }

    #[test]
    fn state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamStore::new(0, DType::F32);
        let x = ps.param("x", &[2], Init::Ones).unwrap();
        let grads = x.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&ps, &grads, 0.1).unwrap();
        opt.save(&dir.path().join("opt.safetensors")).unwrap();
        let mut back = Adam::new(AdamConfig::default());
        back.load(&dir.path().join("opt.safetensors"), &ps, opt.steps)
            .unwrap();
        assert_eq!(back.steps, 1);
        let (m0, _) = &opt.moments["x"];
        let (m1, _) = &back.moments["x"];
        assert_eq!(m0.to_vec1::<f32>().unwrap(), m1.to_vec1::<f32>().unwrap());
    }
}
