use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{GradMap, ParamStore, Real};
use crate::error::{FateError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr0: f64,
    pub eta_min: f64,
    pub momentum: f64,
    pub total_steps: usize,
}

impl SgdConfig {
    pub fn new(lr0: f64, total_steps: usize) -> Self {
        SgdConfig {
            lr0,
            eta_min: 0.0,
            momentum: 0.9,
            total_steps,
        }
    }
}

/// Cosine-annealed rate: `eta_min + (lr0 - eta_min) * (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(lr0: f64, eta_min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return eta_min;
    }
    let t = step.min(total) as f64 / total as f64;
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (PI * t).cos())
}

/// SGD with heavy-ball momentum on a cosine schedule.
#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    pub config: SgdConfig,
    step: usize,
    buffers: BTreeMap<String, Vec<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: SgdConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.config.lr0, self.config.eta_min, self.step, self.config.total_steps)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }

    /// Applies one update `m <- momentum*m + g; p <- p - lr(t)*m` and
    /// advances the step counter. Returns the rate used.
    pub fn sgd_step(&mut self, grads: &GradMap<F>, params: &mut ParamStore<F>) -> Result<f64> {
        if self.step >= self.config.total_steps {
            return Err(FateError::ScheduleExhausted {
                step: self.step,
                total: self.config.total_steps,
            });
        }
        validate(grads, params)?;
        let lr = self.lr();
        let lr_f = F::lit(lr);
        let mu = F::lit(self.config.momentum);
        for (name, g) in grads {
            let buf = match self.buffers.get_mut(name) {
                Some(buf) => {
                    for (m, &gv) in buf.iter_mut().zip(g.data()) {
                        *m = mu * *m + gv;
                    }
                    buf
                }
                None => self.buffers.entry(name.clone()).or_insert_with(|| g.data().to_vec()),
            };
            let p = params.get_mut(name)?;
            for (w, &m) in p.tensor.data_mut().iter_mut().zip(buf.iter()) {
                *w -= lr_f * m;
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

// Checks every gradient before any parameter is touched.
fn validate<F: Real>(grads: &GradMap<F>, params: &ParamStore<F>) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if !p.trainable {
            return Err(FateError::FrozenParameter(name.clone()));
        }
        if p.tensor.len() != g.len() {
            return Err(FateError::Shape(format!("gradient for `{name}` has wrong size")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay applied to matrices only.
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl AdamConfig {
    pub fn new(lr0: f64, total_steps: usize) -> Self {
        AdamConfig {
            lr0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: total_steps / 10,
            total_steps,
        }
    }
}

/// AdamW with linear warmup into a cosine schedule. Used for backbone
/// pretraining only.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    step: usize,
    moments: BTreeMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        let c = &self.config;
        if self.step < c.warmup_steps {
            return c.lr0 * (self.step + 1) as f64 / c.warmup_steps as f64;
        }
        cosine_lr(c.lr0, 0.0, self.step - c.warmup_steps, c.total_steps - c.warmup_steps)
    }

    pub fn adam_step(&mut self, grads: &GradMap<F>, params: &mut ParamStore<F>) -> Result<f64> {
        if self.step >= self.config.total_steps {
            return Err(FateError::ScheduleExhausted {
                step: self.step,
                total: self.config.total_steps,
            });
        }
        validate(grads, params)?;
        let c = self.config;
        let lr = self.lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let step_size = F::lit(lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        let eps = F::lit(c.eps);
        for (name, g) in grads {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![F::zero(); g.len()], vec![F::zero(); g.len()]));
            let p = params.get_mut(name)?;
            let decay = if p.tensor.rank() >= 2 {
                F::lit(1.0 - lr * c.weight_decay)
            } else {
                F::one()
            };
            for ((w, &gv), (mi, vi)) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (F::one() - b1) * gv;
                *vi = b2 * *vi + (F::one() - b2) * gv * gv;
                *w = *w * decay - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamStore::<f64>::new();
        params.insert("p", Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap(), true);
        let mut opt = AdamState::new(AdamConfig::new(0.1, 500));
        for _ in 0..500 {
            let mut grads = GradMap::new();
            let g: Vec<f64> = params.tensor("p").unwrap().data().iter().map(|x| 2.0 * x).collect();
            grads.insert("p".to_string(), Tensor::from_f64(&[2], &g).unwrap());
            opt.adam_step(&grads, &mut params).unwrap();
        }
        assert!(params.tensor("p").unwrap().data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn schedule_endpoints_and_monotone() {
        assert_eq!(cosine_lr(0.03, 0.0, 0, 100), 0.03);
        assert_eq!(cosine_lr(0.03, 0.0, 100, 100), 0.0);
        assert_eq!(cosine_lr(0.1, 0.01, 100, 100), 0.01);
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = cosine_lr(0.03, 0.001, t, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn first_step_is_plain_gradient_descent() {
        let mut params = ParamStore::<f64>::new();
        params.insert("p", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap(), true);
        let mut grads = GradMap::new();
        grads.insert("p".to_string(), Tensor::from_f64(&[2], &[0.5, 2.0]).unwrap());
        let mut opt = OptimizerState::new(SgdConfig::new(0.1, 10));
        let lr = opt.sgd_step(&grads, &mut params).unwrap();
        assert_eq!(lr, 0.1);
        assert_eq!(params.tensor("p").unwrap().data(), &[1.0 - 0.1 * 0.5, -1.0 - 0.1 * 2.0]);
        // second step: m = 0.9 g + g
        let lr2 = opt.lr();
        opt.sgd_step(&grads, &mut params).unwrap();
        let expect = 1.0 - 0.1 * 0.5 - lr2 * (0.9 * 0.5 + 0.5);
        assert!((params.tensor("p").unwrap().data()[0] - expect).abs() < 1e-15);
        assert_eq!(opt.buffer_names().collect::<Vec<_>>(), vec!["p"]);
    }

    #[test]
    fn rejects_unknown_frozen_and_exhausted() {
        let mut params = ParamStore::<f32>::new();
        params.insert("frozen", Tensor::zeros(&[1]), false);
        let mut opt = OptimizerState::new(SgdConfig::new(0.1, 1));
        let mut grads = GradMap::new();
        grads.insert("ghost".to_string(), Tensor::zeros(&[1]));
        assert!(matches!(opt.sgd_step(&grads, &mut params), Err(FateError::UnknownParameter(_))));
        let mut grads = GradMap::new();
        grads.insert("frozen".to_string(), Tensor::zeros(&[1]));
        assert!(matches!(opt.sgd_step(&grads, &mut params), Err(FateError::FrozenParameter(_))));
        opt.sgd_step(&GradMap::new(), &mut params).unwrap();
        assert!(matches!(
            opt.sgd_step(&GradMap::new(), &mut params),
            Err(FateError::ScheduleExhausted { .. })
        ));
    }
}
