use super::ParamStore;

/// Adam with bias correction. Frozen parameters are skipped entirely.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: Vec::new() }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        for (i, p) in store.iter_mut().enumerate() {
            if self.moments.len() <= i {
                self.moments.push((vec![0.0; p.grad.len()], vec![0.0; p.grad.len()]));
            }
            if p.frozen {
                p.grad.iter_mut().for_each(|g| *g = 0.0);
                continue;
            }
            let (m, v) = &mut self.moments[i];
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&mut p.grad).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * *g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * *g * *g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
                *g = 0.0;
            }
        }
    }
}
