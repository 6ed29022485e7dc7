//! Adam with bias correction, decoupled weight decay and a linear
//! warmup/decay learning-rate schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{read_tensor_file, write_tensor_file};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub grad_clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 50,
            total_steps: 2000,
            weight_decay: 0.01,
            grad_clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if c <= 0.0 {
                return bad(format!("grad_clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Learning rate for a 1-based step; zero at 0 and at `total_steps`,
    /// peaking at `warmup_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let (w, t, s) = (self.warmup_steps as f64, self.total_steps as f64, step as f64);
        let factor = if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                1.0
            } else {
                s / w
            }
        } else if self.total_steps > self.warmup_steps {
            (t - s) / (t - w)
        } else {
            0.0
        };
        self.lr * factor.clamp(0.0, 1.0)
    }
}

/// One trainable tensor paired with its gradient for an update.
pub struct ParamSlot<'a, T> {
    pub value: &'a mut Tensor<T>,
    pub grad: Option<&'a [T]>,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: OptimizerConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: OptimizerConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        })
    }

    /// Applies one update; a missing gradient counts as zero. Returns the
    /// learning rate used.
    pub fn update(&mut self, slots: Vec<ParamSlot<'_, T>>) -> Result<f64> {
        if slots.len() != self.m.len() {
            return Err(Error::Input(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                slots.len()
            )));
        }
        for (slot, m) in slots.iter().zip(&self.m) {
            if slot.value.shape() != m.shape() {
                return Err(Error::Dimension {
                    op: "adam",
                    left: m.shape().to_vec(),
                    right: slot.value.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.lr_at(self.step);

        let mut clip = T::one();
        if let Some(max_norm) = c.grad_clip_norm {
            let sq: f64 = slots
                .iter()
                .filter_map(|s| s.grad)
                .flat_map(|g| g.iter())
                .map(|x| x.as_f64() * x.as_f64())
                .sum();
            let norm = sq.sqrt();
            if norm > max_norm {
                clip = T::of(max_norm / norm);
            }
        }

        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(self.step as i32));
        let (lr_t, eps, wd) = (T::of(lr), T::of(c.eps), T::of(c.weight_decay));
        for ((slot, m), v) in slots.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let decay = slot.decay && c.weight_decay > 0.0;
            let m = m.data_mut();
            let v = v.data_mut();
            for (i, w) in slot.value.data_mut().iter_mut().enumerate() {
                let g = slot.grad.map_or(T::zero(), |g| g[i] * clip);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut delta = m_hat / (v_hat.sqrt() + eps);
                if decay {
                    delta += wd * *w;
                }
                *w -= lr_t * delta;
            }
        }
        Ok(lr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "optimizer",
            "step": self.step,
            "config": self.config,
        });
        let names: Vec<String> = (0..self.m.len())
            .flat_map(|i| [format!("m.{i}"), format!("v.{i}")])
            .collect();
        let tensors: Vec<(&str, &Tensor<T>)> = names
            .iter()
            .zip(self.m.iter().zip(&self.v).flat_map(|(m, v)| [m, v]))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        write_tensor_file(path, &meta, &tensors)
    }

    /// Restores moments and step count into an optimizer built for the
    /// same parameter shapes. The configuration is kept from `self`.
    pub fn load_state(&mut self, path: &Path) -> Result<()> {
        let file = read_tensor_file(path)?;
        if file.meta.get("kind").and_then(|k| k.as_str()) != Some("optimizer") {
            return Err(Error::CheckpointFormat("not an optimizer checkpoint".into()));
        }
        let step = file
            .meta
            .get("step")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| Error::CheckpointFormat("optimizer header lacks step".into()))?;
        if file.tensors.len() != 2 * self.m.len() {
            return Err(Error::CheckpointFormat(format!(
                "optimizer checkpoint holds {} tensors, expected {}",
                file.tensors.len(),
                2 * self.m.len()
            )));
        }
        let slots = self.m.iter_mut().zip(self.v.iter_mut()).flat_map(|(m, v)| [m, v]);
        for (slot, arr) in slots.zip(&file.tensors) {
            arr.assign_to(slot)?;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = OptimizerConfig {
            lr: 1e-3,
            warmup_steps: 50,
            total_steps: 2000,
            ..OptimizerConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(50), 1e-3);
        assert_eq!(c.lr_at(2000), 0.0);
        assert!((c.lr_at(25) - 5e-4).abs() < 1e-18);
        assert!((c.lr_at(1025) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn warmup_beyond_total_rejected() {
        let c = OptimizerConfig {
            warmup_steps: 10,
            total_steps: 5,
            ..OptimizerConfig::default()
        };
        assert!(c.validate().is_err());
    }

    fn slot<'a>(value: &'a mut Tensor<f64>, grad: &'a [f64], decay: bool) -> ParamSlot<'a, f64> {
        ParamSlot {
            value,
            grad: Some(grad),
            decay,
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after one step, so the move is lr·g/(|g| + eps).
        let config = OptimizerConfig {
            lr: 0.1,
            warmup_steps: 0,
            total_steps: 10,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = Adam::<f64>::new(config, &[vec![2]]).unwrap();
        let mut w = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let lr = opt.update(vec![slot(&mut w, &[0.5, -2.0], true)]).unwrap();
        assert!((lr - 0.09).abs() < 1e-15);
        assert!((w.data()[0] - (1.0 - lr)).abs() < 1e-6);
        assert!((w.data()[1] + (1.0 - lr)).abs() < 1e-6);
    }

    #[test]
    fn decay_only_touches_flagged_tensors() {
        let config = OptimizerConfig {
            lr: 0.1,
            warmup_steps: 0,
            total_steps: 10,
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        };
        let mut opt = Adam::<f64>::new(config, &[vec![1], vec![1]]).unwrap();
        let mut a = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut b = Tensor::new(vec![1], vec![2.0]).unwrap();
        let lr = opt
            .update(vec![slot(&mut a, &[0.0], true), slot(&mut b, &[0.0], false)])
            .unwrap();
        assert!((a.data()[0] - (2.0 - lr * 0.5 * 2.0)).abs() < 1e-12);
        assert_eq!(b.data()[0], 2.0);
    }

    #[test]
    fn zero_learning_rate_leaves_values() {
        let config = OptimizerConfig {
            lr: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = Adam::<f64>::new(config, &[vec![3]]).unwrap();
        let mut w = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        opt.update(vec![slot(&mut w, &[1.0, 1.0, 1.0], true)]).unwrap();
        assert_eq!(w.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let config = OptimizerConfig {
            lr: 0.1,
            warmup_steps: 0,
            total_steps: 10,
            weight_decay: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            grad_clip_norm: Some(1.0),
            ..OptimizerConfig::default()
        };
        let mut clipped = Adam::<f64>::new(config.clone(), &[vec![2]]).unwrap();
        let mut w = Tensor::zeros(&[2]);
        clipped.update(vec![slot(&mut w, &[30.0, 40.0], true)]).unwrap();
        assert!((clipped.m[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((clipped.m[0].data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.ckpt");
        let mut opt = Adam::<f64>::new(OptimizerConfig::default(), &[vec![2], vec![1, 3]]).unwrap();
        let mut a = Tensor::zeros(&[2]);
        let mut b = Tensor::zeros(&[1, 3]);
        opt.update(vec![slot(&mut a, &[0.1, 0.2], true), slot(&mut b, &[1.0, 2.0, 3.0], false)])
            .unwrap();
        opt.save(&path).unwrap();
        let mut fresh = Adam::<f64>::new(OptimizerConfig::default(), &[vec![2], vec![1, 3]]).unwrap();
        fresh.load_state(&path).unwrap();
        assert_eq!(fresh, opt);
    }
}
