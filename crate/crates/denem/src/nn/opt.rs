//! Flat-vector optimizers and the training learning-rate schedule.

use super::Elem;

/// Plain stochastic gradient descent, no momentum.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    /// `params -= lr * grads`, restricted to `mask` when given.
    pub fn step(&self, params: &mut [Elem], grads: &[Elem], mask: Option<&[bool]>) {
        debug_assert_eq!(params.len(), grads.len());
        let lr = self.lr as Elem;
        match mask {
            None => {
                for (p, &g) in params.iter_mut().zip(grads.iter()) {
                    *p -= lr * g;
                }
            }
            Some(m) => {
                debug_assert_eq!(m.len(), params.len());
                for ((p, &g), &keep) in params.iter_mut().zip(grads.iter()).zip(m.iter()) {
                    if keep {
                        *p -= lr * g;
                    }
                }
            }
        }
    }
}

/// Adam with bias correction; state lives alongside the parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(param_len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            t: 0,
        }
    }

    pub fn step(&mut self, lr: f64, params: &mut [Elem], grads: &[Elem]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= (lr * mhat / (vhat.sqrt() + self.eps)) as Elem;
        }
    }
}

/// Linear warm-up followed by cosine annealing to zero.
pub fn cosine_warmup_lr(base_lr: f64, step: usize, total_steps: usize, warmup_steps: usize) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}
