use rand::RngCore;

use super::{base_loss, mmf_term, representation_matrix, Combination, Extension, LossConfig};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::{Network, Optimizer};
use crate::tensor::Tensor;

/// Loss values and optimizer activity of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub base_loss: f64,
    /// Extension term before weighting; `None` when no extension is active.
    pub ext_loss: Option<f64>,
    pub optimizer_steps: usize,
}

/// One training iteration on a mini-batch.
///
/// Weighted-sum mode takes a single step on `base + lambda * extension`.
/// Alternating mode first steps on the extension alone, then runs a fresh
/// forward pass and steps on the base loss.
pub fn combined_step(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
    opt: &mut Optimizer,
    rng: &mut dyn RngCore,
) -> Result<StepOutcome> {
    let mut outcome = StepOutcome { base_loss: f64::NAN, ext_loss: None, optimizer_steps: 0 };
    let alternating = cfg.combination() == Combination::Alternating && cfg.extension != Extension::None;

    if alternating {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fwd = net.forward_train(&mut g, xv, rng)?;
        let rep = representation_matrix(&mut g, fwd.z, labels)?;
        let term = mmf_term(&mut g, rep.u, cfg.extension)?.expect("extension is active");
        let value = finite(&g, term, "extension")?;
        apply(net, opt, &mut g, term, &fwd)?;
        outcome.ext_loss = Some(value);
        outcome.optimizer_steps += 1;
    }

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let fwd = net.forward_train(&mut g, xv, rng)?;
    let base = base_loss(&mut g, cfg, fwd.z, fwd.logits, labels)?;
    outcome.base_loss = finite(&g, base, cfg.base.name())?;
    let mut total = base;
    if !alternating {
        let rep = representation_matrix(&mut g, fwd.z, labels)?;
        if let Some(term) = mmf_term(&mut g, rep.u, cfg.extension)? {
            outcome.ext_loss = Some(finite(&g, term, "extension")?);
            let weighted = g.scale(term, cfg.lambda);
            total = g.add(base, weighted)?;
        }
    }
    apply(net, opt, &mut g, total, &fwd)?;
    outcome.optimizer_steps += 1;
    Ok(outcome)
}

fn finite(g: &Graph, v: crate::autograd::Var, what: &str) -> Result<f64> {
    let x = g.value(v).item().unwrap_or(f64::NAN);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numerical(format!("{what} loss is {x}")))
    }
}

fn apply(net: &mut Network, opt: &mut Optimizer, g: &mut Graph, loss: crate::autograd::Var, fwd: &crate::nn::Forward) -> Result<()> {
    g.backward(loss)?;
    net.zero_grad();
    net.accumulate_grads(g, fwd);
    opt.step(net.params_mut())
}
