//! Adam optimizer over a flat parameter vector with per-parameter learning rates.

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Applies one update. `lr(i)` gives the learning rate of parameter `i`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr(i) * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Appends fresh moment slots for `n` new parameters.
    pub fn grow(&mut self, n: usize) {
        self.m.resize(self.m.len() + n, 0.0);
        self.v.resize(self.v.len() + n, 0.0);
    }

    /// Keeps moments for the parameter blocks whose `keep` flag is set.
    pub fn retain_blocks(&mut self, block: usize, keep: &[bool]) {
        let mut m = Vec::with_capacity(self.m.len());
        let mut v = Vec::with_capacity(self.v.len());
        for (b, &k) in keep.iter().enumerate() {
            if k {
                m.extend_from_slice(&self.m[b * block..(b + 1) * block]);
                v.extend_from_slice(&self.v[b * block..(b + 1) * block]);
            }
        }
        self.m = m;
        self.v = v;
    }
}
