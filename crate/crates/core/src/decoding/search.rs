use std::cmp::Ordering;

use super::{DecodeConfig, Hypothesis};
use crate::canvas::{Action, Canvas, Split};
use crate::error::Result;
use crate::model::Blm;
use crate::tensor::Real;
use crate::trajectory::TrajectoryStep;

/// One scored action for a hypothesis.
#[derive(Clone, Debug)]
pub(super) struct Candidate {
    pub blank: usize,
    pub word: u32,
    pub class: usize,
    pub log_prob: f64,
}

impl Candidate {
    fn key(&self) -> (usize, u32, usize) {
        (self.blank, self.word, self.class)
    }
}

/// Higher score first, then lowest `(blank, word, class)`.
fn by_score(a: &Candidate, b: &Candidate) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.key().cmp(&b.key()))
}

/// Indices of the `k` best finite entries of `row`, best first, ties to the lower index.
fn top_k<F: Real>(row: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| row[i].is_finite()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp_f(row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

trait TotalCmp {
    fn total_cmp_f(self, other: Self) -> Ordering;
}

impl<F: Real> TotalCmp for F {
    fn total_cmp_f(self, other: Self) -> Ordering {
        self.f64().total_cmp(&other.f64())
    }
}

/// Splits a plain blank may use: creating blanks is allowed only while
/// `generated + blanks_after ≤ budget` remains satisfiable.
fn split_allowed(hyp: &Hypothesis, split: Split, blank_len: Option<usize>, budget: Option<usize>) -> bool {
    match budget {
        Some(b) => hyp.generated() + hyp.canvas.blank_count() + split.new_blanks(blank_len) <= b,
        None => true,
    }
}

/// Every allowed action over blank × top-k words × split classes, best first.
pub(super) fn expand<F: Real>(
    model: &Blm<F>,
    hyp: &Hypothesis,
    top: usize,
    budget: Option<usize>,
) -> Result<Vec<Candidate>> {
    let mut scores = model.score(&hyp.canvas)?;
    let lengths = scores.blank_lengths().to_vec();
    let mut queries = Vec::new();
    for b in 0..scores.blank_count() {
        for w in top_k(scores.words.row(b), top) {
            queries.push((b, w as u32));
        }
    }
    let split = scores.split(&queries)?;
    let mut out = Vec::with_capacity(queries.len() * split.cols());
    for (q, &(b, w)) in queries.iter().enumerate() {
        let base = scores.blank[b].f64() + scores.words.get(b, w as usize).f64();
        for class in 0..split.cols() {
            let lp = split.get(q, class).f64();
            if !lp.is_finite() {
                continue;
            }
            let s = match lengths[b] {
                None => Split::from_flag_class(class),
                Some(_) => Split::LeftLen(class),
            };
            if !split_allowed(hyp, s, lengths[b], budget) {
                continue;
            }
            out.push(Candidate {
                blank: b,
                word: w,
                class,
                log_prob: base + lp,
            });
        }
    }
    out.sort_by(by_score);
    Ok(out)
}

pub(super) fn action_of<F: Real>(model: &Blm<F>, hyp: &Hypothesis, c: &Candidate) -> Action {
    let word = model.vocab().token_for_id(c.word);
    let split = match hyp.canvas.blank_lengths()[c.blank] {
        None => Split::from_flag_class(c.class),
        Some(_) => Split::LeftLen(c.class),
    };
    Action {
        blank: c.blank,
        word,
        split,
    }
}

/// Applies `action` scored at `log_prob`.
pub(super) fn advance(hyp: &Hypothesis, action: Action, log_prob: f64) -> Result<Hypothesis> {
    let canvas = hyp.canvas.apply(&action)?;
    let mut trajectory = hyp.trajectory.clone();
    trajectory.push(TrajectoryStep {
        step: trajectory.len(),
        canvas: hyp.canvas.clone(),
        action,
    });
    Ok(Hypothesis {
        canvas,
        log_prob: hyp.log_prob + log_prob,
        trajectory,
    })
}

/// Budget for plain canvases; length-annotated canvases need none.
pub(super) fn budget_for(canvas: &Canvas, cfg: &DecodeConfig) -> Option<usize> {
    let annotated = canvas.blank_lengths().iter().any(Option::is_some);
    (!annotated).then(|| cfg.budget(canvas))
}

/// Repeatedly applies the highest-scoring action until no blank remains.
pub fn greedy_fill<F: Real>(model: &Blm<F>, canvas: &Canvas, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let budget = budget_for(canvas, cfg);
    let mut hyp = Hypothesis::start(canvas.clone());
    while !hyp.is_complete() {
        let cands = expand(model, &hyp, cfg.top_k, budget)?;
        let best = cands.first().ok_or(crate::error::BlmError::NoCandidates)?;
        let action = action_of(model, &hyp, best);
        hyp = advance(&hyp, action, best.log_prob)?;
    }
    Ok(hyp)
}

/// Beam search over joint sentence and trajectory log-probability.
///
/// Each round expands every live hypothesis and keeps the `beam` best
/// expansions overall; finished ones move to the result pool. Returns the
/// pool best first.
pub fn beam_fill<F: Real>(model: &Blm<F>, canvas: &Canvas, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let budget = budget_for(canvas, cfg);
    let start = Hypothesis::start(canvas.clone());
    if start.is_complete() {
        return Ok(vec![start]);
    }
    let mut live = vec![start];
    let mut pool = Vec::new();
    while !live.is_empty() {
        let mut pooled: Vec<(usize, Candidate)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            for c in expand(model, hyp, cfg.top_k, budget)? {
                pooled.push((h, c));
            }
        }
        pooled.sort_by(|(ha, a), (hb, b)| {
            let ta = live[*ha].log_prob + a.log_prob;
            let tb = live[*hb].log_prob + b.log_prob;
            tb.total_cmp(&ta).then(ha.cmp(hb)).then_with(|| a.key().cmp(&b.key()))
        });
        pooled.truncate(cfg.beam);
        let mut next = Vec::with_capacity(pooled.len());
        for (h, c) in pooled {
            let action = action_of(model, &live[h], &c);
            let hyp = advance(&live[h], action, c.log_prob)?;
            if hyp.is_complete() {
                pool.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    let lp = cfg.length_penalty;
    pool.sort_by(|a, b| b.score(lp).total_cmp(&a.score(lp)));
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::{CanvasItem, Variant};
    use crate::decoding::{rescore, DecodeConfig, Strategy};
    use crate::model::test_support::tiny_model;
    use crate::vocab::Mode;

    fn beam(b: usize) -> DecodeConfig {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam: b,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn complete_canvas_is_returned_unchanged() {
        let m = tiny_model(&["a", "b"], Variant::Plain, 1);
        let c = Canvas::from_tokens(&m.vocab().tokenize("a b"));
        let h = greedy_fill(&m, &c, &DecodeConfig::default()).unwrap();
        assert_eq!(h.canvas, c);
        assert!(h.trajectory.is_empty());
        assert_eq!(beam_fill(&m, &c, &beam(3)).unwrap()[0].canvas, c);
    }

    #[test]
    fn budget_equal_to_blanks_forces_single_words() {
        let m = tiny_model(&["a", "b", "c"], Variant::Plain, 5);
        let a = m.vocab().token("a");
        let c = Canvas::from_items(vec![
            CanvasItem::Blank(None),
            CanvasItem::Word(a.clone()),
            CanvasItem::Blank(None),
            CanvasItem::Word(a),
            CanvasItem::Blank(None),
        ]);
        let cfg = DecodeConfig {
            max_tokens: Some(3),
            ..DecodeConfig::default()
        };
        let h = greedy_fill(&m, &c, &cfg).unwrap();
        assert_eq!(h.trajectory.len(), 3);
        for s in &h.trajectory {
            assert_eq!(s.action.split, Split::Flags { left: false, right: false });
        }
    }

    #[test]
    fn joint_score_matches_rescoring() {
        for seed in 0..4 {
            let m = tiny_model(&["a", "b", "c"], Variant::Plain, seed);
            let h = greedy_fill(&m, &Canvas::initial(), &DecodeConfig::default()).unwrap();
            assert!(h.is_complete());
            assert!((rescore(&m, &h).unwrap() - h.log_prob).abs() < 1e-9);
            for w in h.trajectory.windows(2) {
                assert!(w[1].step == w[0].step + 1);
            }
            for hb in beam_fill(&m, &Canvas::initial(), &beam(4)).unwrap() {
                assert!((rescore(&m, &hb).unwrap() - hb.log_prob).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..6 {
            let m = tiny_model(&["a", "b", "c"], Variant::Plain, seed);
            let g = greedy_fill(&m, &Canvas::initial(), &DecodeConfig::default()).unwrap();
            let b = beam_fill(&m, &Canvas::initial(), &beam(1)).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0], g);
        }
    }

    #[test]
    fn beam_five_is_no_worse_than_greedy() {
        for seed in 0..8 {
            let m = tiny_model(&["a", "b", "c", "d"], Variant::Plain, seed);
            let a = m.vocab().token("a");
            let two = Canvas::from_items(vec![
                CanvasItem::Blank(None),
                CanvasItem::Word(a),
                CanvasItem::Blank(None),
            ]);
            for c in [Canvas::initial(), two] {
                let g = greedy_fill(&m, &c, &DecodeConfig::default()).unwrap();
                let b = beam_fill(&m, &c, &beam(5)).unwrap();
                assert!(b[0].log_prob >= g.log_prob - 1e-12, "seed {seed}");
            }
        }
    }

    /// Best joint log-probability over all trajectories within `budget`, by brute force.
    fn exhaustive_best(m: &crate::model::Blm<f64>, hyp: &Hypothesis, budget: usize) -> f64 {
        if hyp.is_complete() {
            return hyp.log_prob;
        }
        let mut best = f64::NEG_INFINITY;
        for c in expand(m, hyp, usize::MAX, Some(budget)).unwrap() {
            let next = advance(hyp, action_of(m, hyp, &c), c.log_prob).unwrap();
            best = best.max(exhaustive_best(m, &next, budget));
        }
        best
    }

    #[test]
    fn wide_beam_finds_the_exhaustive_optimum() {
        for seed in 0..3 {
            let m = tiny_model(&["a", "b"], Variant::Plain, seed);
            let cfg = DecodeConfig {
                max_tokens: Some(3),
                top_k: 100,
                ..beam(100_000)
            };
            let c = Canvas::initial();
            let oracle = exhaustive_best(&m, &Hypothesis::start(c.clone()), 3);
            let got = beam_fill(&m, &c, &cfg).unwrap()[0].log_prob;
            assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        }
    }

    #[test]
    fn length_aware_fills_exact_lengths() {
        let m = tiny_model(&["a", "b", "c"], Variant::LengthAware, 2);
        let a = m.vocab().token("a");
        let c = Canvas::from_items(vec![
            CanvasItem::Blank(Some(3)),
            CanvasItem::Word(a),
            CanvasItem::Blank(Some(2)),
        ]);
        let h = greedy_fill(&m, &c, &DecodeConfig::default()).unwrap();
        assert_eq!(h.trajectory.len(), 5);
        assert_eq!(h.canvas.len(), 6);
        assert_eq!(h.render(Mode::Word).split(' ').nth(3), Some("a"));
        assert!((rescore(&m, &h).unwrap() - h.log_prob).abs() < 1e-9);
    }
}
