//! AdamW with decoupled weight decay, and the polynomial learning-rate
//! schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
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
            weight_decay: 1e-2,
        }
    }
}

/// Optimizer state over one flat parameter vector (a `ParamSet` is
/// traversed in order).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, num_elements: usize) -> Self {
        Self {
            cfg,
            steps: 0,
            m: vec![0.0; num_elements],
            v: vec![0.0; num_elements],
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of `params` in place.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adamw", &[params.len(), grads.len()], &[self.m.len()]));
        }
        self.steps += 1;
        let c = self.cfg;
        let bc1 = 1.0 - math::powf(c.beta1, self.steps as f64);
        let bc2 = 1.0 - math::powf(c.beta2, self.steps as f64);
        for i in 0..params.len() {
            let g = grads[i];
            params[i] *= 1.0 - lr * c.weight_decay;
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (math::sqrt(vh) + c.eps);
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        if !params.same_layout(grads) {
            return Err(Error::invalid("adamw", "gradient layout differs from parameters"));
        }
        let mut flat: Vec<f64> = params.values().collect();
        let g: Vec<f64> = grads.values().collect();
        self.step_flat(&mut flat, &g, lr)?;
        let mut it = flat.into_iter();
        for p in params.iter_mut() {
            for v in p.value.data_mut() {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }
}

/// `lr0 · (1 − t/T)^power`, clamped at zero past the end.
pub fn poly_lr(lr0: f64, t: usize, total: usize, power: f64) -> f64 {
    if total == 0 || t >= total {
        return 0.0;
    }
    lr0 * math::powf(1.0 - t as f64 / total as f64, power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(poly_lr(1e-2, 0, 50, 0.9), 1e-2);
        assert_eq!(poly_lr(1e-2, 50, 50, 0.9), 0.0);
        assert!(poly_lr(1e-2, 25, 50, 0.9) < 1e-2);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first step ±lr for any nonzero gradient
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            2,
        );
        let mut p = [1.0, -1.0];
        opt.step_flat(&mut p, &[3.0, -0.5], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut opt = AdamW::new(AdamWConfig::default(), 1);
        let mut p = [2.0];
        opt.step_flat(&mut p, &[0.0], 0.5).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.5 * 1e-2)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(AdamWConfig::default(), 1);
        let mut p = [5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.step_flat(&mut p, &g, 1e-2).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn length_mismatch_errors() {
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        assert!(opt.step_flat(&mut [0.0], &[0.0], 0.1).is_err());
    }
}
