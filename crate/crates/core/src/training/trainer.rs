use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::loss::{efficient_loss, efficient_loss_and_grad, LossReport};
use super::optim::{clip_grad_norm, Optimizer};
use super::TrainConfig;
use crate::autodiff::Gradients;
use crate::canvas::Token;
use crate::error::{BlmError, Result};
use crate::model::Blm;
use crate::tensor::Real;

/// Mean batch loss before the update at `step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub per_token: f64,
}

/// Draws `t` uniformly from `0..n` and a uniformly random `t`-prefix of an order.
pub fn sample_prefix<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let t = rng.gen_range(0..n);
    let mut positions: Vec<usize> = (0..n).collect();
    let (prefix, _) = positions.partial_shuffle(rng, t);
    prefix.to_vec()
}

/// Per-sentence losses for `(sentence, prefix)` pairs, evaluated without dropout.
pub fn batch_losses<F: Real>(model: &Blm<F>, batch: &[(Vec<Token>, Vec<usize>)]) -> Result<Vec<LossReport>> {
    batch
        .par_iter()
        .map(|(x, prefix)| efficient_loss(model, x, prefix))
        .collect()
}

struct Job<'a> {
    x: &'a [Token],
    prefix: Vec<usize>,
    dropout_seed: u64,
}

/// Minimizes the mean efficient loss over `corpus`.
///
/// Sentences are visited in reshuffled epochs; each gets an independent
/// `(t, prefix)`. `on_checkpoint` runs every `checkpoint_every` steps and
/// after the final step.
pub fn train<F: Real>(
    model: &mut Blm<F>,
    corpus: &[Vec<Token>],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &Blm<F>) -> Result<()>,
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(BlmError::EmptyCorpus);
    }
    if corpus.iter().any(Vec::is_empty) {
        return Err(BlmError::EmptySentence);
    }
    model.set_dropout(cfg.dropout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(
        cfg.optimizer,
        cfg.learning_rate,
        cfg.weight_decay,
        cfg.warmup_steps,
        model.params().len(),
    );
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = corpus.len();
    let mut curve = Vec::with_capacity(cfg.max_steps);

    for step in 0..cfg.max_steps {
        let jobs: Vec<Job<'_>> = (0..cfg.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let x = &corpus[order[cursor]];
                cursor += 1;
                Job {
                    x,
                    prefix: sample_prefix(x.len(), &mut rng),
                    dropout_seed: rng.gen(),
                }
            })
            .collect();

        let dropout = cfg.dropout > 0.0;
        let shared: &Blm<F> = model;
        let results: Vec<(LossReport, Gradients<F>)> = jobs
            .par_iter()
            .map(|job| {
                let mut drng = ChaCha8Rng::seed_from_u64(job.dropout_seed);
                let r: Option<&mut dyn RngCore> = if dropout { Some(&mut drng) } else { None };
                efficient_loss_and_grad(shared, job.x, &job.prefix, r)
            })
            .collect::<Result<_>>()?;

        let b = results.len() as f64;
        let mut grads = Gradients::empty(model.params().len());
        let (mut loss, mut per_token) = (0.0, 0.0);
        for (report, g) in results {
            loss += report.loss;
            per_token += report.per_token;
            grads.merge(g);
        }
        let (loss, per_token) = (loss / b, per_token / b);
        if !loss.is_finite() {
            return Err(BlmError::Diverged { step, loss });
        }
        curve.push(CurvePoint { step, loss, per_token });

        grads.scale(F::of(1.0 / b));
        let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(BlmError::Diverged { step, loss: norm });
        }
        opt.step(model.params_mut(), &grads);
        if !model.params().is_finite() {
            return Err(BlmError::Diverged { step, loss });
        }
        log::debug!("step {step} loss {loss:.4} per-token {per_token:.4} grad-norm {norm:.3}");

        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.max_steps {
            on_checkpoint(done, model)?;
        }
    }
    on_checkpoint(cfg.max_steps, model)?;
    Ok(curve)
}
