use super::{Gradients, NumericsError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per registered parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable parameter; frozen ones are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f32) -> Result<(), NumericsError> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "adam: {} params, {} grads, {} moments",
                store.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let g = grads.get(id);
            g.expect_shape("adam", store.get(id).shape())?;
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv as f64;
                let mn = beta1 * *mv as f64 + (1.0 - beta1) * gv;
                let vn = beta2 * *vv as f64 + (1.0 - beta2) * gv * gv;
                *mv = mn as f32;
                *vv = vn as f32;
                let update = lr as f64 * (mn / bc1) / ((vn / bc2).sqrt() + eps);
                *pv = (*pv as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
