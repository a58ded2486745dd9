use super::graph::{Gradients, ParamStore};

/// Adaptive-moment optimizer with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, a)| vec![0.0; a.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient still receive weight decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let p = params.by_index_mut(i).values_mut();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            if let Some(g) = grads.get(i) {
                for (((pj, mj), vj), gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.values()) {
                    *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                    *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                    let update = (*mj / bc1) / ((*vj / bc2).sqrt() + self.eps);
                    *pj -= self.lr * (update + self.weight_decay * *pj);
                }
            } else if self.weight_decay != 0.0 {
                for pj in p.iter_mut() {
                    *pj -= self.lr * self.weight_decay * *pj;
                }
            }
        }
    }
}
