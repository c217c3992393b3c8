//! Adam optimizer over flat parameter slices, with optional global-norm
//! gradient clipping. State serializes into run checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    /// One moment-buffer pair per parameter, in a fixed order the caller
    /// must preserve across steps.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Adam {
            config,
            step_count: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// Applies one update. `params[i]` is updated in place with learning
    /// rate `lrs[i]` from `grads[i]`.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
        lrs: &[f64],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || lrs.len() != self.m.len()
        {
            return Err(SptError::Contract(format!(
                "adam step: {} params, {} grads, {} lrs for {} slots",
                params.len(),
                grads.len(),
                lrs.len(),
                self.m.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            if params[i].len() != self.m[i].len() || grads[i].len() != self.m[i].len() {
                return Err(SptError::Contract(format!(
                    "adam step: slot {} size mismatch ({} vs {})",
                    i,
                    params[i].len(),
                    self.m[i].len()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for e in 0..params[i].len() {
                let g = grads[i][e];
                m[e] = c.beta1 * m[e] + (1.0 - c.beta1) * g;
                v[e] = c.beta2 * v[e] + (1.0 - c.beta2) * g * g;
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                params[i][e] -= lrs[i] * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        let mut p = vec![1.0, -2.0];
        let g = vec![vec![0.5, 0.5]];
        adam.step(&mut [&mut p], &g, &[0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With bias correction, |update| ~= lr on the first step.
        let mut adam = Adam::new(AdamConfig::default(), &[1]);
        let mut p = vec![0.0];
        adam.step(&mut [&mut p], &[vec![3.0]], &[0.01]).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut adam = Adam::new(AdamConfig::default(), &[1]);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = vec![vec![2.0 * p[0]]];
            adam.step(&mut [&mut p], &g, &[0.05]).unwrap();
        }
        assert!(p[0].abs() < 1e-2, "{}", p[0]);
    }

    #[test]
    fn clip_scales_down_large_gradients() {
        let mut grads = vec![vec![3.0, 0.0], vec![4.0]];
        clip_global_norm(&mut grads, 1.0);
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-12);

        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
