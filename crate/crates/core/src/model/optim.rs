use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length; the rate then decays as `1/sqrt(step)`.
    pub warmup_steps: usize,
    /// Global gradient-norm limit; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 400,
            clip_norm: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(config_err(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Learning rate at 1-based `step`: `lr * min(step / w, sqrt(w / step))`.
pub fn lr_at(cfg: &AdamConfig, step: usize) -> f64 {
    let s = step.max(1) as f64;
    if cfg.warmup_steps == 0 {
        return cfg.lr;
    }
    let w = cfg.warmup_steps as f64;
    cfg.lr * (s / w).min((w / s).sqrt())
}

/// Rescales gradients in place so their joint norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let f = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= f);
    }
    norm
}

/// Bias-corrected Adam moments for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[&Tensor], cfg: &AdamConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(config_err(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            if g.len() != p.numel() || m.len() != p.numel() {
                return Err(config_err(format!("optimizer state {i} does not match its parameter")));
            }
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(&[&p], &AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[vec![0.0; 3]], 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = Tensor::zeros(&[4]);
        let cfg = AdamConfig { eps: 1e-8, ..AdamConfig::default() };
        let mut adam = Adam::new(&[&p], &cfg);
        let g = vec![0.3, -2.0, 1e-3, -5e-2];
        adam.step(&mut [&mut p], std::slice::from_ref(&g), 0.01).unwrap();
        for (x, gi) in p.data().iter().zip(&g) {
            // m_hat = g and v_hat = g^2 after one step
            let want = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - want).abs() < 1e-15, "{x} vs {want}");
            assert!((x + 0.01 * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn state_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut adam = Adam::new(&[&p], &AdamConfig::default());
        assert!(adam.step(&mut [&mut p], &[vec![0.0; 3]], 0.1).is_err());
        assert!(adam.step(&mut [], &[], 0.1).is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = AdamConfig { lr: 1.0, warmup_steps: 400, ..AdamConfig::default() };
        assert!((lr_at(&cfg, 1) - 1.0 / 400.0).abs() < 1e-15);
        assert!((lr_at(&cfg, 200) - 0.5).abs() < 1e-15);
        assert_eq!(lr_at(&cfg, 400), 1.0);
        assert!((lr_at(&cfg, 1600) - 0.5).abs() < 1e-15);
        let flat = AdamConfig { warmup_steps: 0, ..cfg };
        assert_eq!(lr_at(&flat, 1000), 1.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
