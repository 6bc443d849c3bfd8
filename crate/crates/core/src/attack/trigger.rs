//! Trigger optimization against a frozen model.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, TriggerSpec};
use crate::error::{Error, Result};
use crate::gradcheck::finite_diff_partial;
use crate::model::{example_grad, l2_norm, FlatParams, MlpConfig, TapeParams};
use crate::tensor::Tensor;

/// Number of times a rejected step halves its learning rate before the
/// optimizer gives up.
pub const MAX_HALVINGS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerOutcome {
    pub trigger: TriggerSpec,
    pub objective_before: f64,
    pub objective_after: f64,
    pub accepted_steps: usize,
}

fn embedded_rows(clean: &Dataset, delta: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut out = Vec::with_capacity(clean.len() * clean.dim());
    for e in clean.examples() {
        out.extend(e.features.iter().zip(delta).zip(mask).map(|((&x, &d), &m)| if m { d } else { x }));
    }
    out
}

fn require_examples(clean: &Dataset) -> Result<()> {
    if clean.is_empty() {
        Err(Error::invalid("trigger optimization needs at least one poisoned example"))
    } else {
        Ok(())
    }
}

/// Mean cross-entropy of the triggered examples against the target class,
/// and its gradient with respect to the pattern (zero off the mask).
pub fn backdoor_loss_and_grad(
    params: &FlatParams,
    model: &MlpConfig,
    clean: &Dataset,
    delta: &[f64],
    mask: &[bool],
    target: usize,
) -> Result<(f64, Vec<f64>)> {
    require_examples(clean)?;
    let (n, d) = (clean.len(), clean.dim());
    let mut tape = Tape::new();
    let p = TapeParams::constants(&mut tape, params, model)?;
    let x = tape.leaf(Tensor::matrix(n, d, embedded_rows(clean, delta, mask))?);
    let z = p.forward(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(z, &vec![target; n])?;
    let grads = tape.backward(loss)?;
    let gx = grads.wrt(x)?;
    let mut g = vec![0.0; d];
    for row in gx.data().chunks(d) {
        for ((gj, &r), &m) in g.iter_mut().zip(row).zip(mask) {
            if m {
                *gj += r;
            }
        }
    }
    Ok((tape.value(loss)?.item()?, g))
}

/// Clean per-example gradients `∇ω L(x_l, y_l)`, shared by every evaluation of
/// the alignment objective within one optimization call.
pub fn clean_gradients(params: &FlatParams, model: &MlpConfig, clean: &Dataset) -> Result<Vec<Vec<f64>>> {
    clean.examples().iter().map(|e| example_grad(params, model, &e.features, e.label)).collect()
}

/// Mean over examples of `‖∇ω L(E(x_l,Δ), ŷ) − ∇ω L(x_l, y_l)‖₂`.
pub fn grad_alignment(
    params: &FlatParams,
    model: &MlpConfig,
    clean: &Dataset,
    clean_grads: &[Vec<f64>],
    delta: &[f64],
    mask: &[bool],
    target: usize,
) -> Result<f64> {
    require_examples(clean)?;
    let d = clean.dim();
    let rows = embedded_rows(clean, delta, mask);
    let mut total = 0.0;
    for (row, g_clean) in rows.chunks(d).zip(clean_grads) {
        let g = example_grad(params, model, row, target)?;
        let diff: Vec<f64> = g.iter().zip(g_clean).map(|(a, b)| a - b).collect();
        total += l2_norm(&diff);
    }
    let v = total / clean.len() as f64;
    if !v.is_finite() {
        return Err(Error::Numeric("gradient-alignment objective is not finite".into()));
    }
    Ok(v)
}

/// Projected descent with per-step backtracking on masked coordinates.
fn descend<F, G>(trigger: &TriggerSpec, steps: usize, lr: f64, objective: F, gradient: G) -> Result<TriggerOutcome>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("trigger learning rate must be non-negative, got {lr}")));
    }
    let mask = trigger.mask().to_vec();
    let mut delta = trigger.delta().to_vec();
    let mut value = objective(&delta)?;
    let before = value;
    let mut accepted = 0;
    if mask.iter().any(|&m| m) && lr > 0.0 {
        for _ in 0..steps {
            let g = gradient(&delta, value)?;
            let mut step_lr = lr;
            let mut moved = false;
            for _ in 0..=MAX_HALVINGS {
                let candidate: Vec<f64> = delta
                    .iter()
                    .zip(&g)
                    .zip(&mask)
                    .map(|((&v, &gv), &m)| if m { (v - step_lr * gv).clamp(0.0, 1.0) } else { v })
                    .collect();
                let cv = objective(&candidate)?;
                if cv <= value {
                    delta = candidate;
                    value = cv;
                    moved = true;
                    break;
                }
                step_lr *= 0.5;
            }
            if !moved {
                break;
            }
            accepted += 1;
        }
    }
    Ok(TriggerOutcome { trigger: trigger.with_delta(delta)?, objective_before: before, objective_after: value, accepted_steps: accepted })
}

/// Minimizes the backdoor loss of the frozen model `params` on the
/// triggered versions of `clean`, moving only masked coordinates.
pub fn optimize_trigger_loss_align(
    trigger: &TriggerSpec,
    params: &FlatParams,
    model: &MlpConfig,
    clean: &Dataset,
    steps: usize,
    lr: f64,
) -> Result<TriggerOutcome> {
    require_examples(clean)?;
    let (mask, target) = (trigger.mask(), trigger.target());
    descend(
        trigger,
        steps,
        lr,
        |d| Ok(backdoor_loss_and_grad(params, model, clean, d, mask, target)?.0),
        |d, _| Ok(backdoor_loss_and_grad(params, model, clean, d, mask, target)?.1),
    )
}

/// Minimizes the gradient-alignment objective, with the pattern gradient
/// taken by central finite differences over the masked coordinates.
pub fn optimize_trigger_grad_align(
    trigger: &TriggerSpec,
    params: &FlatParams,
    model: &MlpConfig,
    clean: &Dataset,
    steps: usize,
    lr: f64,
    fd_eps: f64,
) -> Result<TriggerOutcome> {
    require_examples(clean)?;
    if !(fd_eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference eps must be positive, got {fd_eps}")));
    }
    let (mask, target) = (trigger.mask(), trigger.target());
    let clean_grads = clean_gradients(params, model, clean)?;
    let objective = |d: &[f64]| grad_alignment(params, model, clean, &clean_grads, d, mask, target);
    let coords = trigger.masked_coords();
    descend(trigger, steps, lr, objective, |d, _| {
        let partial = finite_diff_partial(|x| objective(x).unwrap_or(f64::NAN), d, &coords, fd_eps)?;
        let mut g = vec![0.0; d.len()];
        for (&c, v) in coords.iter().zip(partial) {
            g[c] = v;
        }
        Ok(g)
    })
}
