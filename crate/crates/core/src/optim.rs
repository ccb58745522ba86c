//! First-order optimizers over lists of tensors.

use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Returns the update direction for each gradient; callers subtract it.
    pub fn direction(&mut self, grads: &[&Tensor]) -> Vec<Tensor> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut out = Vec::with_capacity(grads.len());
        for ((g, m), v) in grads.iter().zip(&mut self.m).zip(&mut self.v) {
            let mut d = Tensor::zeros(g.shape());
            let it = g
                .data()
                .iter()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(d.data_mut());
            for (((&gi, mi), vi), di) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *di = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
            out.push(d);
        }
        out
    }

    /// Applies one step in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[&Tensor]) {
        let dirs = self.direction(grads);
        for (p, d) in params.iter_mut().zip(dirs) {
            for (x, dx) in p.data_mut().iter_mut().zip(d.data()) {
                *x -= dx;
            }
        }
    }
}
