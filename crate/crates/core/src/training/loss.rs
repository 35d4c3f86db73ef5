//! Per-sentence estimators of the negative order-averaged log-likelihood bound.

use rand::RngCore;

use crate::autodiff::{Gradients, Graph};
use crate::canvas::Token;
use crate::error::{BlmError, Result};
use crate::model::Blm;
use crate::tensor::{ln_factorial, Real};
use crate::trajectory::{canvas_from_partial, enumerate_orders, trajectory_from_order, Order};

/// Longest sentence the exhaustive (`n!`-order) computations accept.
pub const EXACT_LIMIT: usize = 6;

/// One loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    /// Loss in nats per sentence.
    pub loss: f64,
    /// `loss / n`.
    pub per_token: f64,
    /// Number of action log-probabilities scored.
    pub actions: usize,
    /// Sentence length.
    pub n: usize,
}

/// `-log n! - n/(n-t) · Σ log p(a | c)` over all `n - t` next-step actions
/// of the canvas built from `prefix`, from a single encoder pass.
pub fn efficient_loss<F: Real>(model: &Blm<F>, x: &[Token], prefix: &[usize]) -> Result<LossReport> {
    efficient_loss_inner(model, x, prefix, None, false).map(|(r, _)| r)
}

/// [`efficient_loss`] plus parameter gradients; dropout is active when `rng` is given.
pub fn efficient_loss_and_grad<F: Real>(
    model: &Blm<F>,
    x: &[Token],
    prefix: &[usize],
    rng: Option<&mut dyn RngCore>,
) -> Result<(LossReport, Gradients<F>)> {
    efficient_loss_inner(model, x, prefix, rng, true)
        .map(|(r, g)| (r, g.expect("gradients requested")))
}

fn efficient_loss_inner<F: Real>(
    model: &Blm<F>,
    x: &[Token],
    prefix: &[usize],
    rng: Option<&mut dyn RngCore>,
    with_grad: bool,
) -> Result<(LossReport, Option<Gradients<F>>)> {
    let n = x.len();
    if n == 0 {
        return Err(BlmError::EmptySentence);
    }
    let inst = canvas_from_partial(x, prefix, model.variant())?;
    let mut g = Graph::new(model.params());
    let enc = model.encode(&mut g, &inst.canvas, rng)?;
    let actions: Vec<_> = inst.targets.iter().map(|t| &t.action).collect();
    let total = model.actions_log_prob(&mut g, &enc, &actions)?;
    let weight = n as f64 / (n - inst.t) as f64;
    let loss = g.affine(total, F::of(-weight), F::of(-ln_factorial(n)));
    let value = g.scalar(loss).f64();
    let grads = with_grad.then(|| g.backward(loss));
    Ok((
        LossReport {
            loss: value,
            per_token: value / n as f64,
            actions: actions.len(),
            n,
        },
        grads,
    ))
}

/// Single-action estimate `-log n! - n · log p(a_t | c_t)` along `order`.
pub fn naive_loss<F: Real>(model: &Blm<F>, x: &[Token], order: &Order, t: usize) -> Result<LossReport> {
    let n = x.len();
    if n == 0 {
        return Err(BlmError::EmptySentence);
    }
    if t >= n {
        return Err(BlmError::NoActionsLeft { prefix: t, len: n });
    }
    let steps = trajectory_from_order(x, order, model.variant())?;
    let step = &steps[t];
    let lp = model.action_log_prob(&step.canvas, &step.action)?.f64();
    let loss = -ln_factorial(n) - n as f64 * lp;
    Ok(LossReport {
        loss,
        per_token: loss / n as f64,
        actions: 1,
        n,
    })
}

/// Sum of `log p(a_t | c_t)` along the trajectory of `order`, one encoder
/// pass per step.
pub fn trajectory_log_prob<F: Real>(model: &Blm<F>, x: &[Token], order: &Order) -> Result<f64> {
    let steps = trajectory_from_order(x, order, model.variant())?;
    steps.iter().try_fold(0.0, |acc, s| {
        Ok(acc + model.action_log_prob(&s.canvas, &s.action)?.f64())
    })
}

/// `log n! + (1/n!) Σ_σ log p(x, σ)` by enumerating every order.
pub fn lower_bound_exact<F: Real>(model: &Blm<F>, x: &[Token]) -> Result<f64> {
    let n = x.len();
    if n == 0 {
        return Err(BlmError::EmptySentence);
    }
    if n > EXACT_LIMIT {
        return Err(BlmError::TooManyOrders {
            n,
            limit: EXACT_LIMIT,
        });
    }
    let orders = enumerate_orders(n)?;
    let mut sum = 0.0;
    for o in &orders {
        sum += trajectory_log_prob(model, x, o)?;
    }
    Ok(ln_factorial(n) + sum / orders.len() as f64)
}
