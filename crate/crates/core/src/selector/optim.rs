use alloc::vec;
use alloc::vec::Vec;

/// AdamW with decoupled weight decay, applied to every parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(num_params: usize, lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, weight_decay, beta1, beta2, eps, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let bc2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
    }
}
