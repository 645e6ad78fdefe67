use crate::float::Float;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that holds a gradient, then clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (F::from_f64_lossy(beta1), F::from_f64_lossy(beta2));
        let (lr_f, eps_f) = (F::from_f64_lossy(lr), F::from_f64_lossy(eps));
        let (c1, c2) = (F::from_f64_lossy(c1), F::from_f64_lossy(c2));
        let ids: Vec<_> = store.ids().collect();
        if self.first.len() < ids.len() {
            self.first.resize_with(ids.len(), Vec::new);
            self.second.resize_with(ids.len(), Vec::new);
        }
        for id in ids {
            let t = store.tensor_mut(id);
            let Some(g) = t.grad().map(<[F]>::to_vec) else { continue };
            let i = id.index();
            if self.first[i].is_empty() {
                self.first[i] = vec![F::zero(); g.len()];
                self.second[i] = vec![F::zero(); g.len()];
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr_f * m_hat / (v_hat.sqrt() + eps_f);
            }
            t.zero_grad();
        }
    }
}
