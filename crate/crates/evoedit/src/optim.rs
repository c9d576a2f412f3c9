//! AdamW, the warm-up + cosine learning-rate schedule, and EMA.

use serde::{Deserialize, Serialize};

use crate::nn::Params;

/// Linear warm-up to `peak` over the first `warmup_fraction` of `total`
/// steps, then cosine decay to zero at step `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f64,
    pub total: usize,
    pub warmup_fraction: f64,
}

impl CosineSchedule {
    pub fn warmup_steps(&self) -> usize {
        ((self.total as f64 * self.warmup_fraction).round() as usize).max(1)
    }

    /// Learning rate used by optimizer step `step` (1-based; 0 gives 0).
    pub fn lr(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step <= w {
            return self.peak * step as f64 / w as f64;
        }
        if step >= self.total {
            return 0.0;
        }
        let p = (step - w) as f64 / (self.total - w) as f64;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Params,
    v: Params,
    steps: u64,
}

impl AdamW {
    pub fn new(params: &Params, config: AdamWConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pi);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.sum_squares().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Exponential moving average of parameters. The effective decay ramps up
/// as `min(decay, (1 + n) / (10 + n))` so early averages are not dominated
/// by the initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Params,
    pub updates: u64,
}

impl Ema {
    pub fn new(params: &Params, decay: f64) -> Self {
        Self {
            decay,
            shadow: params.clone(),
            updates: 0,
        }
    }

    pub fn effective_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    /// `shadow ← d·shadow + (1 − d)·params`.
    pub fn update(&mut self, params: &Params) {
        let d = self.effective_decay();
        for (name, s) in self.shadow.iter_mut() {
            let p = params.get(name).expect("same layout");
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        self.updates += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        let s = CosineSchedule {
            peak: 1e-4,
            total: 1000,
            warmup_fraction: 0.05,
        };
        assert_eq!(s.lr(50), 1e-4);
        assert!(s.lr(25) < 1e-4);
        assert_eq!(s.lr(1000), 0.0);
        assert!(s.lr(999) < 1e-9);
        assert!((s.lr(525) - 0.5e-4).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_sign_sized() {
        let mut p = Params::new();
        p.insert("x", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut g = Params::new();
        g.insert("x", Tensor::new(&[2], vec![0.3, -5.0]));
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut p, &g, 0.1);
        let x = p.get("x").unwrap().data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn ema_converges_to_constant_params() {
        let mut p = Params::new();
        p.insert("x", Tensor::scalar(0.0));
        let mut ema = Ema::new(&p, 0.99);
        p.get_mut("x").unwrap().data_mut()[0] = 1.0;
        for _ in 0..3000 {
            ema.update(&p);
        }
        assert!((ema.shadow.get("x").unwrap().data()[0] - 1.0).abs() < 1e-9);
    }
}
