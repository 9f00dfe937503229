use crate::error::{Result, TensorError};
use crate::param::ParamStore;

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f32) -> Self {
        Adam { lr, ..Self::default() }
    }

    /// Applies one update to every parameter of `store` and clears the grads.
    /// Fails without touching anything if any parameter lacks a gradient.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.value().grad().is_none()) {
            return Err(TensorError::Usage(format!(
                "parameter `{}` has no gradient; run backward first",
                p.name()
            )));
        }
        let (b1, b2) = (self.beta1 as f64, self.beta2 as f64);
        for p in store.iter_mut() {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let grad = p.value.grad().expect("checked above").to_vec();
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            let w = p.value.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                w[i] -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
            p.value.clear_grad();
        }
        Ok(())
    }
}
