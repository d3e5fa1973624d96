use crate::ndtensor::{Gradients, ParamId, ParamStore};

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update. Parameters without a gradient see a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (id, g) in grads.params() {
            let k = id.index();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let value = store.get_mut(id).value.data_mut();
            for (((x, &g), m), v) in value.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *x -= self.lr * update;
            }
        }
        // Moments of parameters absent from `grads` decay as if g = 0.
        let touched: std::collections::HashSet<usize> = grads.params().map(|(id, _)| id.index()).collect();
        for k in (0..self.m.len()).filter(|k| !touched.contains(k)) {
            let id = ParamId(k);
            let value = store.get_mut(id).value.data_mut();
            for ((x, m), v) in value.iter_mut().zip(self.m[k].iter_mut()).zip(self.v[k].iter_mut()) {
                *m *= self.beta1;
                *v *= self.beta2;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}
