use serde::{Deserialize, Serialize};

use super::network::Param;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
    Sgd,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: beta1(), beta2: beta2(), eps: adam_eps() }
    }
}

/// First-order optimizer over a fixed parameter list.
///
/// Adam keeps per-parameter moment estimates and one step counter shared by
/// all parameters. Parameters without a gradient are left untouched, moments
/// included.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::default(), lr)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if params.iter().all(|p| p.grad.is_none()) {
            return Err(Error::MissingGradients);
        }
        for p in params.iter() {
            if let Some(g) = &p.grad {
                if !g.all_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient in {}", p.name)));
                }
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    if let Some(g) = &p.grad {
                        p.value.data_mut().iter_mut().zip(g.data()).for_each(|(w, g)| *w -= self.lr * g);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (k, p) in params.iter_mut().enumerate() {
                    let Some(g) = &p.grad else { continue };
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        params.iter_mut().for_each(|p| p.grad = None);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(w: f64, g: Option<f64>) -> Param {
        Param { name: "w".into(), value: Tensor::new(vec![1], vec![w]).unwrap(), grad: g.map(|g| Tensor::new(vec![1], vec![g]).unwrap()) }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = [param(0.0, Some(1.0))];
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut p).unwrap();
        assert!((p[0].value.data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(opt.steps(), 1);
        assert!(p[0].grad.is_none());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = [param(0.7, Some(0.0))];
        let mut opt = Optimizer::adam(0.1);
        for _ in 0..5 {
            p[0].grad = Some(Tensor::new(vec![1], vec![0.0]).unwrap());
            opt.step(&mut p).unwrap();
        }
        assert_eq!(p[0].value.data()[0], 0.7);
    }

    #[test]
    fn adam_matches_closed_form_over_steps() {
        let grads = [0.5, -1.0, 2.0];
        let mut p = [param(1.0, None)];
        let mut opt = Optimizer::adam(0.01);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in grads.iter().enumerate() {
            p[0].grad = Some(Tensor::new(vec![1], vec![*g]).unwrap());
            opt.step(&mut p).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = t as i32 + 1;
            w -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p[0].value.data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn parameters_without_gradients_are_skipped() {
        let mut p = [param(1.0, Some(1.0)), param(2.0, None)];
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut p).unwrap();
        assert_eq!(p[1].value.data()[0], 2.0);
        assert!(p[0].value.data()[0] < 1.0);
    }

    #[test]
    fn no_gradients_is_an_error() {
        let mut p = [param(1.0, None)];
        assert!(matches!(Optimizer::adam(0.1).step(&mut p), Err(Error::MissingGradients)));
    }

    #[test]
    fn sgd_step() {
        let mut p = [param(1.0, Some(2.0))];
        Optimizer::sgd(0.25).step(&mut p).unwrap();
        assert_eq!(p[0].value.data()[0], 0.5);
    }
}
