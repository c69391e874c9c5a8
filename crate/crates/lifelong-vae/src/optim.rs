//! Adam optimizer over flat parameter vectors, with bias correction.

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Reset moments and step counter, e.g. after a teacher swap.
    pub fn reset(&mut self, n_params: usize) {
        self.step = 0;
        self.m = vec![0.0; n_params];
        self.v = vec![0.0; n_params];
    }

    /// One update step in place. `params` and `grads` must match the
    /// accumulator length.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], learning_rate: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, step 1 moves each parameter by lr * sign(g).
        let mut adam = AdamState::new(2);
        let mut params = vec![1.0, -2.0];
        adam.update(&mut params, &[0.5, -0.25], 0.1);
        assert!((params[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((params[1] - (-2.0 + 0.1)).abs() < 1e-6);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut adam = AdamState::new(1);
        let mut params = vec![5.0];
        for _ in 0..2000 {
            let g = 2.0 * (params[0] - 3.0);
            adam.update(&mut params, &[g], 0.05);
        }
        assert!((params[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn reset_clears_state() {
        let mut adam = AdamState::new(1);
        let mut params = vec![0.0];
        adam.update(&mut params, &[1.0], 0.1);
        adam.reset(3);
        assert_eq!(adam.step, 0);
        assert_eq!(adam.m, vec![0.0; 3]);
        assert_eq!(adam.v, vec![0.0; 3]);
    }
}
