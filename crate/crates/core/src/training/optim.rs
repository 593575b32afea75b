use super::TrainConfig;

/// AdamW moments, aligned with the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Decoupled weight decay on masked entries, then a bias-corrected
    /// adaptive-moment step.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], decay: &[bool], tc: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (tc.adam_beta1, tc.adam_beta2);
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for i in 0..params.len() {
            if decay[i] {
                params[i] *= 1.0 - tc.lr * tc.weight_decay;
            }
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= tc.lr * mhat / (vhat.sqrt() + tc.adam_eps);
        }
    }
}
