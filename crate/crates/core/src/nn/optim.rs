use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 0.001,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Linear warm-up to `base_lr` over `warmup_steps`, constant afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.base_lr;
        }
        self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Adam moments for every parameter of one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar = f32> {
    pub step: u64,
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Result<Self> {
        if config.warmup_steps == 0 {
            return Err(Error::invalid("warmup_steps must be positive"));
        }
        let zeros = params
            .iter()
            .map(|(_, p)| vec![T::zero(); p.tensor.numel()])
            .collect::<Vec<_>>();
        Ok(OptimizerState {
            step: 0,
            config,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// Learning rate the next call to [`step`](Self::step) will use.
    pub fn next_lr(&self) -> f64 {
        self.config.lr_at(self.step + 1)
    }

    /// Apply one bias-corrected Adam update from the gradients stored on
    /// `params`, then clear them. Returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<f64> {
        for (_, p) in params.iter() {
            if p.trainable && p.tensor.grad.is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let lr = self.config.lr_at(self.step);
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.config.beta1), T::lit(self.config.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr_t, eps) = (T::lit(lr), T::lit(self.config.epsilon));
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.tensor.grad.take().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, w) in p.tensor.values_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w = *w - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }

    /// Moment tensors as named checkpoint entries.
    pub fn to_entries(&self, params: &ParamSet<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(T::lit(self.step as f64)))];
        for (i, (_, p)) in params.iter().enumerate() {
            let shape = p.tensor.shape().to_vec();
            out.push((
                format!("adam.m.{}", p.name),
                Tensor::new(shape.clone(), self.first[i].clone()).expect("moment shape"),
            ));
            out.push((
                format!("adam.v.{}", p.name),
                Tensor::new(shape, self.second[i].clone()).expect("moment shape"),
            ));
        }
        out
    }

    pub fn from_entries(config: AdamConfig, params: &ParamSet<T>, entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut state = Self::new(config, params)?;
        let mut found_step = false;
        for (name, t) in entries {
            if name == "adam.step" {
                state.step = t.values()[0].to_u64().unwrap_or(0);
                found_step = true;
                continue;
            }
            let (slot, pname) = if let Some(n) = name.strip_prefix("adam.m.") {
                (&mut state.first, n)
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                (&mut state.second, n)
            } else {
                return Err(Error::invalid(format!("unexpected optimizer entry `{name}`")));
            };
            let id = params
                .id(pname)
                .ok_or_else(|| Error::invalid(format!("optimizer entry for unknown parameter `{pname}`")))?;
            if slot[id.0].len() != t.numel() {
                return Err(Error::shape(format!("optimizer moment for `{pname}`")));
            }
            slot[id.0] = t.into_values();
        }
        if !found_step {
            return Err(Error::invalid("optimizer checkpoint has no step counter"));
        }
        Ok(state)
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, p) in params.iter() {
        if let Some(g) = &p.tensor.grad {
            sq += g.iter().map(|v| v.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = &mut p.tensor.grad {
                g.iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_reaches_base_rate() {
        let c = AdamConfig {
            warmup_steps: 4000,
            ..Default::default()
        };
        assert_eq!(c.lr_at(4000), 0.001);
        assert!((c.lr_at(2000) - 0.0005).abs() < 1e-15);
        assert_eq!(c.lr_at(10_000), 0.001);
        let mut prev = 0.0;
        for t in 0..=4000 {
            assert!(c.lr_at(t) >= prev);
            prev = c.lr_at(t);
        }
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", Tensor::scalar(0.0), true).unwrap();
        let cfg = AdamConfig {
            warmup_steps: 1,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, &ps).unwrap();

        // Hand recurrence with g = 1.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.001);
        let (mut m, mut v, mut p) = (0.0, 0.0, 0.0);
        for t in 1..=2 {
            ps.get_mut(w).tensor.grad = Some(vec![1.0]);
            opt.step(&mut ps).unwrap();
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((ps.value(w).values()[0] - p).abs() < 1e-15);
        assert!((p + 0.002).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("enc.w", Tensor::scalar(0.0), true).unwrap();
        let mut opt = OptimizerState::new(AdamConfig::default(), &ps).unwrap();
        let err = opt.step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
    }
}
