//! Adam optimizer over flat parameter vectors.

/// One optimizable tensor: current values plus Adam moment buffers.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let n = values.len();
        Param { shape, values, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction. The step count lives here so that checkpoints
/// can restore the exact optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0 }
    }

    /// Apply one update to every param given matching gradient slices.
    /// `grads[i]` must have `params[i].numel()` elements; a `None` gradient
    /// leaves that param untouched but still advances its moments' clock.
    pub fn step(&mut self, params: &mut [Param], grads: &[Option<Vec<f64>>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (p, g) in params.iter_mut().zip(grads) {
            let g = match g {
                Some(g) => g,
                None => continue,
            };
            assert_eq!(g.len(), p.values.len(), "gradient length mismatch");
            for i in 0..p.values.len() {
                let mut gi = g[i];
                if c.weight_decay != 0.0 {
                    gi += c.weight_decay * p.values[i];
                }
                p.m[i] = c.beta1 * p.m[i] + (1.0 - c.beta1) * gi;
                p.v[i] = c.beta2 * p.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.values[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }

    /// Serialize moments and step count (for checkpointing).
    pub fn state(&self) -> (u64, AdamConfig) {
        (self.t, self.config)
    }
}

/// Flatten a param's moment buffers for checkpoint serialization.
pub fn moments(p: &Param) -> (&[f64], &[f64]) {
    (&p.m, &p.v)
}

/// Restore a param's moment buffers from a checkpoint.
pub fn set_moments(p: &mut Param, m: Vec<f64>, v: Vec<f64>) {
    assert_eq!(m.len(), p.values.len());
    assert_eq!(v.len(), p.values.len());
    p.m = m;
    p.v = v;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_quadratic() {
        // minimize (x-3)^2, gradient 2(x-3)
        let mut p = Param::new(vec![1], vec![0.0]);
        let mut opt = Adam::new(AdamConfig { beta1: 0.9, ..Default::default() });
        for _ in 0..2000 {
            let g = 2.0 * (p.values[0] - 3.0);
            opt.step(std::slice::from_mut(&mut p), &[Some(vec![g])], 0.01);
        }
        assert!((p.values[0] - 3.0).abs() < 1e-3, "got {}", p.values[0]);
    }

    #[test]
    fn first_step_size_is_lr() {
        // With bias correction the very first Adam step is ±lr regardless of
        // gradient magnitude (up to eps).
        let mut p = Param::new(vec![1], vec![0.0]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(std::slice::from_mut(&mut p), &[Some(vec![123.0])], 0.5);
        assert!((p.values[0] + 0.5).abs() < 1e-6, "got {}", p.values[0]);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = Param::new(vec![1], vec![10.0]);
        let mut opt = Adam::new(AdamConfig { weight_decay: 5e-4, ..Default::default() });
        for _ in 0..100 {
            opt.step(std::slice::from_mut(&mut p), &[Some(vec![0.0])], 0.01);
        }
        assert!(p.values[0] < 10.0 && p.values[0] > 0.0);
    }

    #[test]
    fn none_gradient_skips_param() {
        let mut ps = vec![Param::new(vec![1], vec![1.0]), Param::new(vec![1], vec![1.0])];
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut ps, &[Some(vec![1.0]), None], 0.1);
        assert_ne!(ps[0].values[0], 1.0);
        assert_eq!(ps[1].values[0], 1.0);
    }
}
