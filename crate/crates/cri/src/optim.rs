//! Adaptive-moment first-order optimizer over flat parameter buffers.

/// Adam with bias correction. State lives in flat `f64` buffers so the same
/// optimizer drives style offsets and generator parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One update step; writes the parameter deltas into `step_out`.
    pub fn step(&mut self, grad: &[f64], step_out: &mut [f64]) {
        assert_eq!(grad.len(), self.m.len());
        assert_eq!(step_out.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            step_out[i] = -self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
