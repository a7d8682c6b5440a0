//! AdamW: Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Optimizer state: step count and per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update with learning rate `lr` and clear all gradients.
    pub fn step_with_lr(&mut self, params: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.take().expect("checked above");
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi as f64;
                let mn = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let vn = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let mhat = mn / bc1;
                let vhat = vn / bc2;
                let mut wv = *w as f64;
                wv -= lr * c.weight_decay * wv;
                wv -= lr * mhat / (vhat.sqrt() + c.eps);
                *w = wv as f32;
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, lr)
    }

    /// Moments and step counter as a parameter store, for checkpointing.
    pub fn state_store(&self, params: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        let mut s = ParamStore::new();
        s.add("step", Tensor::scalar(self.step as f32))?;
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            s.add(format!("m/{}", p.name), Tensor::new(p.value.shape().to_vec(), m.clone())?)?;
            s.add(format!("v/{}", p.name), Tensor::new(p.value.shape().to_vec(), v.clone())?)?;
        }
        Ok(s)
    }

    pub fn restore(config: AdamWConfig, params: &ParamStore<f32>, state: &ParamStore<f32>) -> Result<Self> {
        let get = |name: String| {
            state
                .id(&name)
                .map(|id| state.value(id).data().to_vec())
                .ok_or(TensorError::UnknownParam(name))
        };
        let step = get("step".into())?[0] as u64;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in params.iter() {
            m.push(get(format!("m/{}", p.name))?);
            v.push(get(format!("v/{}", p.name))?);
        }
        Ok(Self { config, step, m, v })
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}
