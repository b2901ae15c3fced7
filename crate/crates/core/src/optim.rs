//! Adam over flat f64 parameter buffers.

/// Adam state for one parameter tensor. The `bias_correction` flag exists for
/// the relaxation-only baseline, which runs with it disabled.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub bias_correction: bool,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, true)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, bias_correction: bool) -> Self {
        Adam { beta1, beta2, epsilon: 1e-8, bias_correction, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// Drops all accumulated state (moments and step count).
    pub fn reset(&mut self) {
        self.m.clear();
        self.v.clear();
        self.t = 0;
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len(), "adam_step: parameter/gradient length mismatch");
        if self.m.is_empty() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.t += 1;
        let (c1, c2) = if self.bias_correction {
            (1.0 - self.beta1.powi(self.t as i32), 1.0 - self.beta2.powi(self.t as i32))
        } else {
            (1.0, 1.0)
        };
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Lazily grown set of Adam states, one per parameter tensor, for optimizers
/// that update many buffers in a canonical order.
#[derive(Default)]
pub struct AdamPerParam {
    states: Vec<Adam>,
}

impl AdamPerParam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, idx: usize, params: &mut [f64], grads: &[f64], lr: f64) {
        while self.states.len() <= idx {
            self.states.push(Adam::default());
        }
        self.states[idx].step(params, grads, lr);
    }
}
