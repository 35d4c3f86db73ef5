use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::search::{advance, budget_for};
use super::{DecodeConfig, Hypothesis};
use crate::canvas::{Action, Canvas, Split};
use crate::error::{BlmError, Result};
use crate::model::Blm;
use crate::tensor::Real;

/// Draws an index with probability proportional to `exp(lp / temperature)`.
fn draw(lps: &[f64], temperature: f64, rng: &mut impl Rng) -> Result<usize> {
    let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(BlmError::NoCandidates);
    }
    let weights = lps.iter().map(|&lp| ((lp - max) / temperature).exp());
    let dist = WeightedIndex::new(weights).map_err(|_| BlmError::NoCandidates)?;
    Ok(dist.sample(rng))
}

fn sample_one<F: Real>(
    model: &Blm<F>,
    canvas: &Canvas,
    budget: Option<usize>,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Hypothesis> {
    let mut hyp = Hypothesis::start(canvas.clone());
    while !hyp.is_complete() {
        let mut scores = model.score(&hyp.canvas)?;
        let blank_lp: Vec<f64> = scores.blank.iter().map(|x| x.f64()).collect();
        let b = draw(&blank_lp, temperature, rng)?;
        let word_lp: Vec<f64> = scores.words.row(b).iter().map(|x| x.f64()).collect();
        let w = draw(&word_lp, temperature, rng)?;
        let split_lp = scores.split(&[(b, w as u32)])?;
        let len = scores.blank_lengths()[b];
        let splits: Vec<Split> = (0..split_lp.cols())
            .map(|c| match len {
                None => Split::from_flag_class(c),
                Some(_) => Split::LeftLen(c),
            })
            .collect();
        let allowed: Vec<f64> = splits
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let ok = match budget {
                    Some(limit) => {
                        hyp.generated() + hyp.canvas.blank_count() + s.new_blanks(len) <= limit
                    }
                    None => true,
                };
                if ok {
                    split_lp.get(0, c).f64()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let c = draw(&allowed, temperature, rng)?;
        let lp = blank_lp[b] + word_lp[w] + split_lp.get(0, c).f64();
        let action = Action {
            blank: b,
            word: model.vocab().token_for_id(w as u32),
            split: splits[c],
        };
        hyp = advance(&hyp, action, lp)?;
    }
    Ok(hyp)
}

/// `cfg.samples` independent ancestral samples.
///
/// Blank, word and split are drawn in turn, each from its distribution
/// sharpened by `cfg.temperature`; splits that would break the token budget
/// are excluded. Recorded log-probabilities are those of the untempered
/// model. Sample `i` uses stream `i` of a generator seeded with `cfg.seed`.
pub fn sample_fill<F: Real>(model: &Blm<F>, canvas: &Canvas, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let budget = budget_for(canvas, cfg);
    (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            sample_one(model, canvas, budget, cfg.temperature, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::Variant;
    use crate::decoding::{greedy_fill, rerank, rescore, Strategy};
    use crate::model::test_support::tiny_model;
    use crate::vocab::Mode;

    fn cfg(samples: usize, temperature: f64) -> DecodeConfig {
        DecodeConfig {
            strategy: Strategy::Sample,
            samples,
            temperature,
            seed: 42,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn seeded_samples_repeat() {
        let m = tiny_model(&["a", "b", "c"], Variant::Plain, 1);
        let a = sample_fill(&m, &Canvas::initial(), &cfg(10, 1.0)).unwrap();
        let b = sample_fill(&m, &Canvas::initial(), &cfg(10, 1.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        for h in &a {
            assert!(h.is_complete());
            assert!((rescore(&m, h).unwrap() - h.log_prob).abs() < 1e-9);
        }
        let best = rerank(&a, Mode::Word, |s| s.len() as f64).unwrap();
        assert!(best < 10);
    }

    #[test]
    fn cold_samples_follow_factor_argmaxes() {
        // With one blank and a word head far more confident than the others,
        // the per-factor argmax and the joint argmax agree.
        let mut m = tiny_model(&["a", "b"], Variant::Plain, 3);
        let id = m.params().find("word.w").unwrap();
        let a = m.vocab().id("a") as usize;
        let w = m.params_mut().get_mut(id);
        for c in 0..w.cols() {
            let v = w.get(a, c);
            w.set(a, c, v * 50.0);
        }
        let g = greedy_fill(&m, &Canvas::initial(), &cfg(1, 1.0)).unwrap();
        let s = sample_fill(&m, &Canvas::initial(), &cfg(3, 1e-6)).unwrap();
        for h in s {
            assert_eq!(h.canvas, g.canvas);
        }
    }

    #[test]
    fn draw_respects_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let i = draw(&[f64::NEG_INFINITY, -1.0, f64::NEG_INFINITY], 1.0, &mut rng).unwrap();
            assert_eq!(i, 1);
        }
        assert!(draw(&[f64::NEG_INFINITY], 1.0, &mut rng).is_err());
    }
}
