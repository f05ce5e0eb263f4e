//! Central finite-difference verification of backward rules.
//!
//! [`GradCheck`] compares the gradients produced by [`Graph::backward`]
//! against `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` coordinate by
//! coordinate. The error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`, so large
//! gradients are compared relatively and tiny ones absolutely.
//!
//! [`suite`] runs the checks that back the `gradcheck` subcommand.

mod suite;

pub use suite::{suite, CaseResult, SuiteOptions, SuiteResult};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input, coordinate)` holding the largest error.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub floor: f64,
    /// Check at most this many coordinates per input, sampled without
    /// replacement. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Skip coordinates whose value is within this distance of zero
    /// (the kink of `abs` and `relu`).
    pub exclude_near_zero: Option<f64>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-3,
            max_coords: None,
            exclude_near_zero: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }

    pub fn excluding_near_zero(mut self, tol: f64) -> Self {
        self.exclude_near_zero = Some(tol);
        self
    }

    /// Checks a scalar function of several tensor inputs.
    pub fn run<F, E>(&self, f: F, inputs: &[Tensor]) -> Result<GradReport, E>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
        E: From<TensorError>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();

        let eval = |perturbed: &[Tensor]| -> Result<f64, E> {
            let mut g = Graph::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            g.value(out).item().ok_or_else(|| TensorError::NonScalarLoss(g.shape(out).to_vec()).into())
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut report = GradReport { max_rel_err: 0.0, worst: None, coords_checked: 0 };
        for (k, input) in inputs.iter().enumerate() {
            let n = input.len();
            let coords: Vec<usize> = match self.max_coords {
                Some(m) if m < n => {
                    let mut c = sample(&mut rng, n, m).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            for i in coords {
                let x0 = input.data()[i];
                if self.exclude_near_zero.is_some_and(|tol| x0.abs() < tol) {
                    continue;
                }
                work[k].data_mut()[i] = x0 + self.eps;
                let up = eval(&work)?;
                work[k].data_mut()[i] = x0 - self.eps;
                let down = eval(&work)?;
                work[k].data_mut()[i] = x0;
                let numeric = (up - down) / (2.0 * self.eps);
                let a = analytic[k].data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                report.coords_checked += 1;
                if err > report.max_rel_err || err.is_nan() {
                    report.max_rel_err = err;
                    report.worst = Some((k, i));
                }
            }
        }
        Ok(report)
    }
}

/// Max relative error of `f`'s gradient at `x` with default settings.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let report = GradCheck::default().with_eps(eps).run(|g, v| f(g, v[0]), std::slice::from_ref(x))?;
    Ok(report.max_rel_err)
}
