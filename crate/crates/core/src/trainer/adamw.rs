use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    step: u64,
    params: Vec<(String, Tensor)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: Vec<(String, Tensor)>) -> Self {
        let m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Self {
            cfg,
            step: 0,
            params,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|(_, p)| p.zero_grad());
    }

    /// Applies one update from the gradients currently held by the parameters.
    pub fn step(&mut self) -> Result<()> {
        let grads = self
            .params
            .iter()
            .map(|(name, p)| p.grad().ok_or_else(|| Error::Contract(format!("parameter '{name}' has no gradient"))))
            .collect::<Result<Vec<_>>>()?;
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let correct1 = 1.0 - c.beta1.powi(t);
        let correct2 = 1.0 - c.beta2.powi(t);
        for (((_, p), g), (m, v)) in self.params.iter().zip(&grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let mut data = p.data_mut();
            for i in 0..data.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                data[i] -= c.lr * c.weight_decay * data[i];
                data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
