use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// Weight decay is added to the gradient before the moment updates.
    Adam { lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam { lr: 0.1, weight_decay: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam { lr, weight_decay, beta1, beta2, eps } => {
                lr >= 0.0
                    && weight_decay >= 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && [lr, weight_decay, eps].iter().all(|v| v.is_finite())
            }
            OptimizerConfig::Sgd { lr } => lr >= 0.0 && lr.is_finite(),
        };
        if !ok {
            return invalid(format!("bad optimizer settings {self:?}"));
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr } => lr,
        }
    }
}

/// Optimizer state over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n: usize) -> Self {
        Optimizer { config, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len(), "parameter and gradient lengths");
        self.t += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g),
            OptimizerConfig::Adam { lr, weight_decay, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for k in 0..params.len() {
                    let g = grad[k] + weight_decay * params[k];
                    self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                    self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                    let mhat = self.m[k] / c1;
                    let vhat = self.v[k] / c2;
                    params[k] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_one_gradient_step() {
        // f(x) = ½‖x − c‖², ∇f = x − c
        let c = [1.0, -2.0];
        let mut x = vec![0.0, 0.0];
        let g: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
        Optimizer::new(OptimizerConfig::Sgd { lr: 0.5 }, 2).step(&mut x, &g);
        assert_eq!(x, vec![0.5, -1.0]);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        for cfg in [OptimizerConfig::Sgd { lr: 0.0 }, OptimizerConfig::Adam { lr: 0.0, weight_decay: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 }] {
            let mut x = vec![0.3, -0.7];
            let mut opt = Optimizer::new(cfg, 2);
            opt.step(&mut x, &[1.0, 2.0]);
            assert_eq!(x, vec![0.3, -0.7]);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr_in_gradient_sign() {
        let mut x = vec![0.0, 0.0, 0.0];
        let cfg = OptimizerConfig::Adam { lr: 0.1, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-12 };
        Optimizer::new(cfg, 3).step(&mut x, &[3.0, -0.01, 0.0]);
        assert!((x[0] + 0.1).abs() < 1e-9 && (x[1] - 0.1).abs() < 1e-9 && x[2] == 0.0);
    }

    #[test]
    fn reset_clears_moments() {
        let mut opt = Optimizer::new(OptimizerConfig::default(), 2);
        opt.step(&mut [0.0, 0.0], &[1.0, 1.0]);
        opt.reset();
        assert_eq!(opt, Optimizer::new(OptimizerConfig::default(), 2));
    }

    #[test]
    fn invalid_settings_rejected() {
        assert!(OptimizerConfig::Sgd { lr: -1.0 }.validate().is_err());
        assert!(OptimizerConfig::Adam { lr: 0.1, weight_decay: 0.0, beta1: 1.0, beta2: 0.9, eps: 1e-8 }.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
