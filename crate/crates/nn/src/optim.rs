//! AdamW with warmup + cosine learning-rate schedule and global-norm clipping.

use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled-weight-decay Adam. Decay applies to parameters of rank >= 2.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            config,
            m: params.values().iter().map(zeros).collect(),
            v: params.values().iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, grad) in grads.iter().enumerate() {
            let decay = params.get(id).rank() >= 2;
            let p = params.get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for (((pi, mi), vi), gi) in p.iter_mut().zip(m).zip(v).zip(grad.data()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                if decay {
                    *pi -= lr * c.weight_decay * *pi;
                }
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_inplace(s);
        }
    }
    norm
}

/// Linear warmup over `warmup_ratio · total` steps, then cosine decay to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl WarmupCosine {
    pub fn new(peak_lr: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_ratio).round() as usize;
        Self {
            peak_lr,
            total_steps: total_steps.max(1),
            warmup_steps,
        }
    }

    /// Learning rate for the 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = WarmupCosine::new(1e-3, 100, 0.05);
        assert_eq!(s.warmup_steps, 5);
        assert!((s.lr(4) - 1e-3).abs() < 1e-15);
        assert!(s.lr(0) < s.lr(4));
        assert!(s.lr(50) < s.lr(5));
        assert!(s.lr(99) < 1e-5);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::new(&[2], vec![3.0, 4.0])];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimises_quadratic() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(&[1, 2], vec![3.0, -2.0]));
        let mut opt = AdamW::new(
            &ps,
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..500 {
            let g = ps.get(0).map(|x| 2.0 * x);
            opt.step(&mut ps, &[g], 0.05);
        }
        assert!(ps.get(0).max_abs() < 1e-2);
    }
}
