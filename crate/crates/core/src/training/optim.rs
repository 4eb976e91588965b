use std::collections::HashMap;

use crate::autodiff::Tensor;
use crate::models::{EntryMut, Model};

/// Adam over the model parameters whose names start with a prefix.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    prefix: String,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(model: &Model, prefix: &str, lr: f64, betas: (f64, f64)) -> Self {
        let params = model.params(prefix);
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            prefix: prefix.to_string(),
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            t: 0,
        }
    }

    /// Current values of the optimized parameters, in optimizer order.
    pub fn params(&self, model: &Model) -> Vec<Tensor> {
        model
            .params(&self.prefix)
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }

    /// Applies one update; `grads` align with [`Adam::params`].
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.names.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let index: HashMap<&str, usize> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |name, e| {
            let (EntryMut::Param(p), Some(&i)) = (e, index.get(name.as_str())) else {
                return;
            };
            let g = grads[i].data();
            let (m, v) = (&mut ms[i], &mut vs[i]);
            let mut values = p.to_vec();
            for k in 0..values.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                values[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            *p = Tensor::param(values, p.shape());
        });
    }
}
