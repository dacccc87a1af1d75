use std::f64::consts::PI;

use crate::{AutodiffError, Gradients, Tensor};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.names.push(name.into());
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classical L2 penalty: `weight_decay * param` is added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Restores a saved state; moment buffers must line up with `params`.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
        params: &ParamStore,
    ) -> Result<Self, AutodiffError> {
        let lens: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
        let ok = |m: &Vec<Vec<f64>>| m.len() == lens.len() && m.iter().zip(&lens).all(|(v, &n)| v.len() == n);
        if !ok(&first) || !ok(&second) {
            return Err(AutodiffError::OptimizerState);
        }
        Ok(Adam {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Zeroes both moment buffers and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        for m in self.first.iter_mut().chain(self.second.iter_mut()) {
            m.fill(0.0);
        }
    }

    /// One update at learning rate `lr`. Nothing is modified if any gradient
    /// is missing or non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), AutodiffError> {
        let mut gathered = Vec::with_capacity(params.len());
        for (name, value) in params.iter() {
            let g = grads
                .param(name)
                .ok_or_else(|| AutodiffError::MissingGradient { param: name.to_string() })?;
            if g.shape() != value.shape() {
                return Err(AutodiffError::MissingGradient { param: name.to_string() });
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient { param: name.to_string() });
            }
            gathered.push(g.data());
        }
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (_, value)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, theta) in value.data_mut().iter_mut().enumerate() {
                let g = gathered[i][j] + weight_decay * *theta;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` at epoch 0 down to `eta_min` at `t_max`,
/// stepped once per epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub eta_min: f64,
    pub t_max: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, eta_min: f64, t_max: usize) -> Result<Self, AutodiffError> {
        if t_max == 0 || !(eta_min <= base_lr) || eta_min < 0.0 {
            return Err(AutodiffError::Schedule(format!(
                "need t_max >= 1 and 0 <= eta_min <= base_lr (got t_max={t_max}, eta_min={eta_min}, base_lr={base_lr})"
            )));
        }
        Ok(CosineSchedule { base_lr, eta_min, t_max })
    }

    pub fn lr(&self, t: usize) -> Result<f64, AutodiffError> {
        if t > self.t_max {
            return Err(AutodiffError::Schedule(format!("epoch {t} beyond t_max {}", self.t_max)));
        }
        if t == 0 {
            return Ok(self.base_lr);
        }
        if t == self.t_max {
            return Ok(self.eta_min);
        }
        let phase = PI * t as f64 / self.t_max as f64;
        Ok(self.eta_min + (self.base_lr - self.eta_min) * (1.0 + phase.cos()) / 2.0)
    }
}
