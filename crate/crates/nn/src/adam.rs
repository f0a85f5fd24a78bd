use crate::error::{NnError, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Applies one update to every parameter and clears the gradients.
    /// Fails without touching anything if any gradient is missing.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(NnError::State(format!("missing gradient for {}", p.name)));
        }
        store.step += 1;
        let t = store.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for p in &mut store.params {
            let g = p.grad.take().expect("checked above");
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k].as_f64();
                let mk = self.beta1 * m[k].as_f64() + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v[k].as_f64() + (1.0 - self.beta2) * gk * gk;
                m[k] = T::of_f64(mk);
                v[k] = T::of_f64(vk);
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                *w = T::of_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}
