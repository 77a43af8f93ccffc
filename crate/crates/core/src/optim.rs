//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use unblur_autograd::Tensor;

use crate::error::{Error, Result};
use crate::nets::ModelState;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// When false the update is `−lr · m̂` (first moment only).
    pub second_moment: bool,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            second_moment: true,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.m
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.v
    }

    /// Restores saved state.
    pub fn restore(
        &mut self,
        step: u64,
        m: BTreeMap<String, Vec<f32>>,
        v: BTreeMap<String, Vec<f32>>,
    ) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// One update of every parameter in `grads`.
    pub fn step(&mut self, state: &mut ModelState, grads: &[(String, Tensor<f32>)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let param = state
                .param_mut(name)
                .ok_or_else(|| Error::Param(format!("unknown parameter `{name}`")))?;
            if param.shape() != grad.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let n = grad.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                m[i] = mi as f32;
                let m_hat = mi / c1;
                let delta = if self.second_moment {
                    let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                    v[i] = vi as f32;
                    m_hat / ((vi / c2).sqrt() + self.eps)
                } else {
                    m_hat
                };
                *p = (*p as f64 - lr * delta) as f32;
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(String, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
