use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::canvas::{Split, Token};
use crate::error::{BlmError, Result};
use crate::model::Blm;
use crate::tensor::{ln_factorial, log_sum_exp, Real};
use crate::training::EXACT_LIMIT;
use crate::trajectory::{canvas_from_partial, enumerate_orders, Order};

/// Scores trajectories of one sentence, sharing work between orders that
/// pass through the same set of placed positions.
struct TrajectoryScorer<'a, F: Real> {
    model: &'a Blm<F>,
    x: &'a [Token],
    /// Placed set → log-probability of placing each position next (`NaN` if placed).
    cache: HashMap<Vec<bool>, Vec<f64>>,
}

impl<'a, F: Real> TrajectoryScorer<'a, F> {
    fn new(model: &'a Blm<F>, x: &'a [Token]) -> Self {
        Self {
            model,
            x,
            cache: HashMap::new(),
        }
    }

    fn next_log_probs(&mut self, placed: &[bool]) -> Result<&[f64]> {
        if !self.cache.contains_key(placed) {
            let prefix: Vec<usize> = (0..placed.len()).filter(|&i| placed[i]).collect();
            let inst = canvas_from_partial(self.x, &prefix, self.model.variant())?;
            let mut scores = self.model.score(&inst.canvas)?;
            let queries: Vec<(usize, u32)> = inst
                .targets
                .iter()
                .map(|t| (t.action.blank, t.action.word.id))
                .collect();
            let split = scores.split(&queries)?;
            let mut out = vec![f64::NAN; placed.len()];
            for (q, t) in inst.targets.iter().enumerate() {
                let a = &t.action;
                let class = match a.split {
                    Split::Flags { .. } => a.split.flag_class().expect("flags"),
                    Split::LeftLen(l) => l,
                };
                out[t.position] = scores.blank[a.blank].f64()
                    + scores.words.get(a.blank, a.word.id as usize).f64()
                    + split.get(q, class).f64();
            }
            self.cache.insert(placed.to_vec(), out);
        }
        Ok(&self.cache[placed])
    }

    fn log_prob(&mut self, order: &Order) -> Result<f64> {
        let mut placed = vec![false; self.x.len()];
        let mut total = 0.0;
        for &j in order.as_slice() {
            total += self.next_log_probs(&placed)?[j];
            placed[j] = true;
        }
        Ok(total)
    }
}

/// `log Σ_σ p(x, σ)` over all `n!` orders.
pub fn exact_log_marginal<F: Real>(model: &Blm<F>, x: &[Token]) -> Result<f64> {
    if x.is_empty() {
        return Err(BlmError::EmptySentence);
    }
    if x.len() > EXACT_LIMIT {
        return Err(BlmError::TooManyOrders {
            n: x.len(),
            limit: EXACT_LIMIT,
        });
    }
    // With all n! orders the estimator's `log n! - log m` term vanishes.
    mc_log_marginal_orders(model, x, &enumerate_orders(x.len())?)
}

/// `log n! - log m + log Σ_i p(x, σ_i)` for the given orders.
pub fn mc_log_marginal_orders<F: Real>(model: &Blm<F>, x: &[Token], orders: &[Order]) -> Result<f64> {
    if x.is_empty() {
        return Err(BlmError::EmptySentence);
    }
    if orders.is_empty() {
        return Err(BlmError::Config("at least one order is required".into()));
    }
    let mut scorer = TrajectoryScorer::new(model, x);
    let lps = orders
        .iter()
        .map(|o| {
            if o.len() != x.len() {
                return Err(BlmError::InvalidOrder(format!(
                    "order of length {} for a sentence of length {}",
                    o.len(),
                    x.len()
                )));
            }
            scorer.log_prob(o)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ln_factorial(x.len()) - (orders.len() as f64).ln() + log_sum_exp(lps.iter().copied()))
}

/// Uniformly random orders for sentence `index` under `seed`.
fn sample_orders(n: usize, m: usize, seed: u64, index: u64) -> Vec<Order> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..m)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            Order::new(p).expect("shuffled permutation")
        })
        .collect()
}

/// Monte-Carlo `log X_m` with `m` uniformly sampled orders.
pub fn mc_log_marginal<F: Real>(model: &Blm<F>, x: &[Token], m: usize, seed: u64) -> Result<f64> {
    if m == 0 {
        return Err(BlmError::Config("m must be at least 1".into()));
    }
    mc_log_marginal_orders(model, x, &sample_orders(x.len(), m, seed, 0))
}

/// Corpus perplexity from per-sentence likelihood estimates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PplEstimate {
    /// Per-sentence `log X_m`.
    pub log_x: Vec<f64>,
    pub lengths: Vec<usize>,
    /// Orders per sentence; 0 marks exhaustive enumeration.
    pub m: usize,
    pub n_tokens: usize,
    /// `exp(-Σ log X_m / Σ n)`.
    pub ppl: f64,
    /// Mean over sentences of `X_m^(-1/n)`.
    pub mean_sentence_ppl: f64,
}

impl PplEstimate {
    fn new(log_x: Vec<f64>, lengths: Vec<usize>, m: usize) -> Self {
        let n_tokens: usize = lengths.iter().sum();
        let ppl = (-log_x.iter().sum::<f64>() / n_tokens as f64).exp();
        let mean_sentence_ppl = log_x
            .iter()
            .zip(&lengths)
            .map(|(lx, &n)| (-lx / n as f64).exp())
            .sum::<f64>()
            / log_x.len() as f64;
        Self {
            log_x,
            lengths,
            m,
            n_tokens,
            ppl,
            mean_sentence_ppl,
        }
    }
}

fn check_corpus(corpus: &[Vec<Token>]) -> Result<()> {
    if corpus.is_empty() {
        return Err(BlmError::EmptyCorpus);
    }
    if corpus.iter().any(Vec::is_empty) {
        return Err(BlmError::EmptySentence);
    }
    Ok(())
}

/// Monte-Carlo corpus perplexity; sentence `i` samples its orders from stream `i` of `seed`.
pub fn corpus_ppl<F: Real>(model: &Blm<F>, corpus: &[Vec<Token>], m: usize, seed: u64) -> Result<PplEstimate> {
    check_corpus(corpus)?;
    if m == 0 {
        return Err(BlmError::Config("m must be at least 1".into()));
    }
    let log_x = corpus
        .par_iter()
        .enumerate()
        .map(|(i, x)| mc_log_marginal_orders(model, x, &sample_orders(x.len(), m, seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PplEstimate::new(log_x, corpus.iter().map(Vec::len).collect(), m))
}

/// Corpus perplexity from exact marginals.
pub fn corpus_ppl_exhaustive<F: Real>(model: &Blm<F>, corpus: &[Vec<Token>]) -> Result<PplEstimate> {
    check_corpus(corpus)?;
    let log_x = corpus
        .par_iter()
        .map(|x| exact_log_marginal(model, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(PplEstimate::new(log_x, corpus.iter().map(Vec::len).collect(), 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::{Canvas, Variant};
    use crate::model::test_support::tiny_model;
    use crate::training::{lower_bound_exact, trajectory_log_prob};

    #[test]
    fn single_token() {
        let m = tiny_model(&["a", "b"], Variant::Plain, 2);
        let x = m.vocab().tokenize("b");
        let a = crate::trajectory::trajectory_from_order(&x, &Order::identity(1), Variant::Plain)
            .unwrap()
            .remove(0)
            .action;
        let lp = m.action_log_prob(&Canvas::initial(), &a).unwrap();
        assert!((exact_log_marginal(&m, &x).unwrap() - lp).abs() < 1e-12);
        assert!((mc_log_marginal(&m, &x, 5, 1).unwrap() - lp).abs() < 1e-12);
        let est = corpus_ppl(&m, &[x], 3, 0).unwrap();
        assert!((est.ppl - (-lp).exp()).abs() < 1e-9);
    }

    #[test]
    fn memoized_scores_match_direct_trajectories() {
        for variant in [Variant::Plain, Variant::LengthAware] {
            let m = tiny_model(&["a", "b", "c"], variant, 6);
            let x = m.vocab().tokenize("a c b a");
            let mut scorer = TrajectoryScorer::new(&m, &x);
            for o in enumerate_orders(4).unwrap() {
                let direct = trajectory_log_prob(&m, &x, &o).unwrap();
                assert!((scorer.log_prob(&o).unwrap() - direct).abs() < 1e-10);
            }
            assert!(scorer.cache.len() <= 1 << 4);
        }
    }

    #[test]
    fn two_tokens_sum_two_trajectories() {
        let m = tiny_model(&["a", "b"], Variant::Plain, 8);
        let x = m.vocab().tokenize("a b");
        let t: Vec<f64> = [vec![0, 1], vec![1, 0]]
            .into_iter()
            .map(|p| trajectory_log_prob(&m, &x, &Order::new(p).unwrap()).unwrap())
            .collect();
        let expected = (t[0].exp() + t[1].exp()).ln();
        assert!((exact_log_marginal(&m, &x).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn marginal_dominates_bound() {
        for seed in 0..3 {
            let m = tiny_model(&["a", "b", "c"], Variant::Plain, seed);
            let x = m.vocab().tokenize("c a b");
            assert!(lower_bound_exact(&m, &x).unwrap() < exact_log_marginal(&m, &x).unwrap());
        }
    }

    #[test]
    fn seeded_estimates_repeat() {
        let m = tiny_model(&["a", "b", "c"], Variant::Plain, 1);
        let corpus: Vec<_> = ["a b c a b", "c c", "b a c"]
            .iter()
            .map(|s| m.vocab().tokenize(s))
            .collect();
        let a = corpus_ppl(&m, &corpus, 4, 9).unwrap();
        assert_eq!(a, corpus_ppl(&m, &corpus, 4, 9).unwrap());
        assert_eq!(a.n_tokens, 10);
        assert!(a.ppl > 0.0 && a.mean_sentence_ppl > 0.0);
        assert!(corpus_ppl(&m, &corpus, 0, 9).is_err());
        assert!(exact_log_marginal(&m, &m.vocab().tokenize("a a a a a a a")).is_err());
    }
}
