//! Trainable parameters and the Adam optimizer.

use crate::error::{check_dim, Result, TensorError};
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub const DEFAULT_LR: f32 = 3e-4;

    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. `grads[i]` belongs to `params[i]`; a `None` entry
    /// is treated as a zero gradient. The update is all-or-nothing: when any
    /// gradient is non-finite no parameter is touched.
    pub fn step(&mut self, params: &mut [Parameter], grads: &[Option<&Tensor>]) -> Result<()> {
        check_dim("adam", "parameter count", params.len(), grads.len())?;
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                check_dim("adam", "gradient size", p.value.numel(), g.numel())?;
                if !g.all_finite() {
                    return Err(TensorError::NonFiniteGradient {
                        name: p.name.clone(),
                    });
                }
            }
        }
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        let step = (self.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                data[i] -= step * m[i] / (v[i].sqrt() / bc2_sqrt + self.eps);
            }
        }
        Ok(())
    }
}
