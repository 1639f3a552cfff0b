//! Adam with bias correction and optional global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::model::RetSegParams;
use crate::tensor::Tensor;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter. `grad_clip > 0` rescales the whole
    /// gradient to that global L2 norm when it exceeds it.
    pub fn step(&mut self, params: &mut RetSegParams, grads: &BTreeMap<String, Tensor>) {
        self.step_clipped(params, grads, 0.0)
    }

    pub fn step_clipped(
        &mut self,
        params: &mut RetSegParams,
        grads: &BTreeMap<String, Tensor>,
        grad_clip: f64,
    ) {
        self.step += 1;
        let scale = if grad_clip > 0.0 {
            let norm: f64 = grads
                .values()
                .flat_map(|g| g.data().iter().map(|&v| v * v))
                .sum::<f64>()
                .sqrt();
            if norm > grad_clip {
                grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };

        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = params.map().keys().cloned().collect();
        for name in names {
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            let value = params.get(&name).expect("name from the map").clone();
            let n = value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut updated = Vec::with_capacity(n);
            for i in 0..n {
                let g = grad.data()[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                updated.push(value.data()[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            params.insert(
                name,
                Tensor::new(value.shape().to_vec(), updated).expect("shape preserved"),
            );
        }
    }
}
