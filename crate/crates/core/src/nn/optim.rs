use serde::{Deserialize, Serialize};

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed by parameter
/// position, so callers must always pass parameters in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [(String, &mut Param)]) {
        let trainable: Vec<&mut Param> = params
            .iter_mut()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| &mut **p)
            .collect();
        if self.m.is_empty() {
            self.m = trainable.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            trainable.len(),
            "parameter set changed between Adam steps"
        );
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in trainable.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 0.01,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub buffers: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            buffers: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [(String, &mut Param)], lr: f32) {
        let trainable: Vec<&mut Param> = params
            .iter_mut()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| &mut **p)
            .collect();
        let first = self.buffers.is_empty();
        if first {
            self.buffers = trainable.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        assert_eq!(
            self.buffers.len(),
            trainable.len(),
            "parameter set changed between SGD steps"
        );
        let SgdConfig { momentum, weight_decay } = self.config;
        for (p, buf) in trainable.into_iter().zip(&mut self.buffers) {
            for i in 0..p.value.len() {
                let g = p.grad[i] + weight_decay * p.value[i];
                buf[i] = if first { g } else { momentum * buf[i] + g };
                p.value[i] -= lr * buf[i];
            }
        }
    }
}

/// Global L2 norm over all trainable gradients.
pub fn grad_norm(params: &[(String, &mut Param)]) -> f32 {
    params
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad.iter())
        .map(|&g| g as f64 * g as f64)
        .sum::<f64>()
        .sqrt() as f32
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm measured before clipping.
pub fn clip_grad_norm(params: &mut [(String, &mut Param)], max_norm: f32) -> f32 {
    let norm = grad_norm(params);
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for (_, p) in params.iter_mut().filter(|(_, p)| p.trainable) {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: Vec<f32>, grad: Vec<f32>) -> Param {
        let mut p = Param::new(vec![value.len()], value);
        p.grad = grad;
        p
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one(vec![1.0, -1.0], vec![0.3, -5.0]);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        adam.step(&mut [("p".into(), &mut p)]);
        // With bias correction the first update is lr * sign(g).
        assert!((p.value[0] - 0.9).abs() < 1e-5);
        assert!((p.value[1] + 0.9).abs() < 1e-5);
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let mut p = one(vec![1.0], vec![1.0]);
        let mut sgd = Sgd::new(SgdConfig {
            momentum: 0.9,
            weight_decay: 0.5,
        });
        sgd.step(&mut [("p".into(), &mut p)], 0.1);
        // g = 1 + 0.5 = 1.5, buf = 1.5
        assert!((p.value[0] - 0.85).abs() < 1e-6);
        p.grad = vec![1.0];
        sgd.step(&mut [("p".into(), &mut p)], 0.1);
        // g = 1 + 0.425, buf = 1.35 + 1.425
        assert!((p.value[0] - (0.85 - 0.1 * 2.775)).abs() < 1e-6);
    }

    #[test]
    fn buffers_are_skipped() {
        let mut p = Param::buffer(vec![1], vec![2.0]);
        p.grad = vec![10.0];
        let mut sgd = Sgd::new(SgdConfig::default());
        sgd.step(&mut [("b".into(), &mut p)], 1.0);
        assert_eq!(p.value, vec![2.0]);
        assert_eq!(grad_norm(&[("b".into(), &mut p)]), 0.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = one(vec![0.0; 2], vec![3.0, 4.0]);
        let mut params = [("a".to_string(), &mut a)];
        let before = clip_grad_norm(&mut params, 1.0);
        assert!((before - 5.0).abs() < 1e-6);
        assert!(grad_norm(&params) <= 1.0 + 1e-6);
        let mut b = one(vec![0.0], vec![0.5]);
        let mut small = [("b".to_string(), &mut b)];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].1.grad, vec![0.5]);
    }
}
