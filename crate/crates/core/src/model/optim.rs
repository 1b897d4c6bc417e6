use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerOptimizer {
    AdamW,
    Sgd,
}

impl FromStr for InnerOptimizer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adamw" => Ok(InnerOptimizer::AdamW),
            "sgd" => Ok(InnerOptimizer::Sgd),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

impl fmt::Display for InnerOptimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InnerOptimizer::AdamW => "adamw",
            InnerOptimizer::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerOptimizerConfig {
    pub kind: InnerOptimizer,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub dropout: f64,
}

impl Default for InnerOptimizerConfig {
    fn default() -> Self {
        InnerOptimizerConfig {
            kind: InnerOptimizer::AdamW,
            lr: 1e-2,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dropout: 0.1,
        }
    }
}

impl InnerOptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        InnerOptimizerConfig {
            kind: InnerOptimizer::Sgd,
            lr,
            weight_decay: 0.0,
            dropout: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.dropout);
        if ok {
            Ok(())
        } else {
            Err(Error::MetaConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// AdamW (decoupled weight decay) or plain SGD with persistent moments.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerOptimizerState {
    pub config: InnerOptimizerConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl InnerOptimizerState {
    pub fn new(config: InnerOptimizerConfig, num_params: usize) -> Self {
        InnerOptimizerState {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn dropout(&self) -> f64 {
        self.config.dropout
    }

    /// Applies one update in place and advances the step counter.
    pub fn inner_step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer over {} values got params {} / grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        match c.kind {
            InnerOptimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= c.lr * (g + c.weight_decay * *p);
                }
            }
            InnerOptimizer::AdamW => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                    self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] *= 1.0 - c.lr * c.weight_decay;
                    params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                }
            }
        }
        Ok(())
    }
}

/// `params - lr * grad`.
pub fn sgd_step(params: &[f64], grad: &[f64], lr: f64) -> Vec<f64> {
    assert_eq!(params.len(), grad.len(), "sgd_step on incongruent vectors");
    params.iter().zip(grad).map(|(p, g)| p - lr * g).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_arithmetic() {
        assert_eq!(sgd_step(&[1.0, 1.0], &[1.0, -1.0], 0.5), vec![0.5, 1.5]);
        assert_eq!(sgd_step(&[3.0, -2.0], &[7.0, 9.0], 0.0), vec![3.0, -2.0]);
        let p = [0.3, -1.2];
        let (g1, g2) = ([1.0, 2.0], [-0.5, 4.0]);
        let two = sgd_step(&sgd_step(&p, &g1, 0.1), &g2, 0.2);
        let summed: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| 0.1 * a + 0.2 * b).collect();
        let one = sgd_step(&p, &summed, 1.0);
        for (a, b) in two.iter().zip(&one) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_without_decay_keeps_params() {
        let cfg = InnerOptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = InnerOptimizerState::new(cfg, 3);
        let mut p = vec![0.5, -1.0, 2.0];
        st.inner_step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_adamw_step_moves_against_gradient() {
        let cfg = InnerOptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = InnerOptimizerState::new(cfg, 4);
        let start = vec![0.1, 0.2, -0.3, 0.0];
        let g = [2.0, -0.001, 5.0, -3.0];
        let mut p = start.clone();
        st.inner_step(&mut p, &g).unwrap();
        for i in 0..4 {
            let delta = p[i] - start[i];
            assert_eq!(delta.signum(), -g[i].signum());
            // bias-corrected first step has magnitude ~lr
            assert!((delta.abs() - cfg.lr).abs() < 1e-6);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_params() {
        let cfg = InnerOptimizerConfig {
            weight_decay: 0.5,
            lr: 0.1,
            ..Default::default()
        };
        let mut st = InnerOptimizerState::new(cfg, 1);
        let mut p = vec![2.0];
        st.inner_step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        // f(x) = (x - 3)^2
        let cfg = InnerOptimizerConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = InnerOptimizerState::new(cfg, 1);
        let mut x = vec![0.0];
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let loss = (x[0] - 3.0f64).powi(2);
            assert!(loss < last);
            last = loss;
            let g = [2.0 * (x[0] - 3.0)];
            st.inner_step(&mut x, &g).unwrap();
        }
        assert!((x[0] - 3.0f64).powi(2) < last);
    }

    #[test]
    fn rejects_incongruent_shapes() {
        let mut st = InnerOptimizerState::new(InnerOptimizerConfig::default(), 2);
        assert!(st.inner_step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
