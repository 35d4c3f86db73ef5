//! Filling blanks at inference time.
//!
//! Every strategy scores actions with the factorized model log-probabilities
//! and records its trajectory, so a returned hypothesis can be re-scored
//! step by step. Plain models obey a token budget: once placing one more
//! blank would leave too few tokens to fill every blank, only splits that
//! create no new blanks are allowed. Length-aware models need no budget since
//! the annotations fix the total.

mod sample;
mod search;

use serde::{Deserialize, Serialize};

pub use sample::sample_fill;
pub use search::{beam_fill, greedy_fill};

use crate::canvas::{Canvas, Variant};
use crate::error::{BlmError, Result};
use crate::model::Blm;
use crate::tensor::Real;
use crate::trajectory::TrajectoryStep;
use crate::vocab::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
    Sample,
}

impl std::str::FromStr for Strategy {
    type Err = BlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam),
            "sample" => Ok(Strategy::Sample),
            other => Err(BlmError::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam: usize,
    /// Words kept per blank when enumerating candidate actions.
    pub top_k: usize,
    pub samples: usize,
    pub temperature: f64,
    /// Token budget for plain models; `None` means `2 * items + 10`.
    pub max_tokens: Option<usize>,
    pub seed: u64,
    /// Exponent of the length normalization applied when ranking finished
    /// hypotheses; 0 ranks by raw joint log-probability.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam: 1,
            top_k: 16,
            samples: 1,
            temperature: 1.0,
            max_tokens: None,
            seed: 0,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.top_k == 0 || self.samples == 0 {
            return Err(BlmError::Config("beam, top_k and samples must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(BlmError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.length_penalty < 0.0 {
            return Err(BlmError::Config("length_penalty must be non-negative".into()));
        }
        Ok(())
    }

    /// Budget for `canvas`: the configured or default budget, raised to the
    /// blank count so every blank can receive at least one word.
    pub fn budget(&self, canvas: &Canvas) -> usize {
        self.max_tokens
            .unwrap_or(2 * canvas.len() + 10)
            .max(canvas.blank_count())
    }
}

/// A partial or finished decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub canvas: Canvas,
    /// `Σ log p(a_t | c_t)` along `trajectory`.
    pub log_prob: f64,
    /// Steps taken, each with the canvas it was applied to.
    pub trajectory: Vec<TrajectoryStep>,
}

impl Hypothesis {
    pub fn start(canvas: Canvas) -> Self {
        Self {
            canvas,
            log_prob: 0.0,
            trajectory: Vec::new(),
        }
    }

    /// Tokens placed so far.
    pub fn generated(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_complete(&self) -> bool {
        self.canvas.is_complete()
    }

    /// Ranking score under `length_penalty`.
    pub fn score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 || self.trajectory.is_empty() {
            self.log_prob
        } else {
            self.log_prob / (self.trajectory.len() as f64).powf(length_penalty)
        }
    }

    pub fn render(&self, mode: Mode) -> String {
        self.canvas.render(mode)
    }

    /// Step log: each intermediate canvas, then the final one.
    pub fn render_trajectory(&self, mode: Mode) -> String {
        crate::trajectory::render_trajectory(&self.trajectory, &self.canvas, mode)
    }
}

/// Re-scores a trajectory action by action.
pub fn rescore<F: Real>(model: &Blm<F>, hyp: &Hypothesis) -> Result<f64> {
    hyp.trajectory.iter().try_fold(0.0, |acc, s| {
        Ok(acc + model.action_log_prob(&s.canvas, &s.action)?.f64())
    })
}

/// Runs the configured strategy; results are best first.
pub fn decode<F: Real>(model: &Blm<F>, canvas: &Canvas, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    match cfg.strategy {
        Strategy::Greedy => greedy_fill(model, canvas, cfg).map(|h| vec![h]),
        Strategy::Beam => beam_fill(model, canvas, cfg),
        Strategy::Sample => {
            let mut out = sample_fill(model, canvas, cfg)?;
            out.sort_by(|a, b| b.score(cfg.length_penalty).total_cmp(&a.score(cfg.length_penalty)));
            Ok(out)
        }
    }
}

/// Length-aware decoding of a canvas whose blanks all carry lengths.
pub fn restore_fill<F: Real>(model: &Blm<F>, canvas: &Canvas, cfg: &DecodeConfig) -> Result<Hypothesis> {
    if model.variant() != Variant::LengthAware {
        return Err(BlmError::ModeMismatch {
            expected: Variant::LengthAware.as_str().into(),
            found: model.variant().as_str().into(),
        });
    }
    if canvas.blank_lengths().iter().any(Option::is_none) {
        return Err(BlmError::ActionKindMismatch(
            "restoration needs length-annotated blanks",
        ));
    }
    canvas.check_lengths(model.vocab().t_max())?;
    decode(model, canvas, cfg)?
        .into_iter()
        .next()
        .ok_or(BlmError::NoCandidates)
}

/// Index of the candidate with the highest external score; ties go to the
/// higher joint log-probability, then to the lower index.
pub fn rerank(
    candidates: &[Hypothesis],
    mode: Mode,
    mut scorer: impl FnMut(&str) -> f64,
) -> Result<usize> {
    let scored: Vec<(f64, f64)> = candidates
        .iter()
        .map(|h| (scorer(&h.render(mode)), h.log_prob))
        .collect();
    let mut best: Option<usize> = None;
    for (i, &(s, lp)) in scored.iter().enumerate() {
        best = match best {
            Some(j) if (scored[j].0, scored[j].1) >= (s, lp) => Some(j),
            _ => Some(i),
        };
    }
    best.ok_or(BlmError::NoCandidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::CanvasItem;
    use crate::model::test_support::tiny_model;

    #[test]
    fn budget_default_and_floor() {
        let c = Canvas::from_items(vec![CanvasItem::Blank(None); 3]);
        let cfg = DecodeConfig::default();
        assert_eq!(cfg.budget(&c), 16);
        let cfg = DecodeConfig {
            max_tokens: Some(1),
            ..cfg
        };
        assert_eq!(cfg.budget(&c), 3);
    }

    #[test]
    fn rerank_rules() {
        let h = |lp: f64| Hypothesis {
            log_prob: lp,
            ..Hypothesis::start(Canvas::initial())
        };
        let c = vec![h(-3.0), h(-1.0), h(-1.0), h(-2.0)];
        assert_eq!(rerank(&c[..1], Mode::Word, |_| 0.0).unwrap(), 0);
        assert_eq!(rerank(&c, Mode::Word, |_| 0.0).unwrap(), 1);
        let mut i = 0;
        let idx = rerank(&c, Mode::Word, |_| {
            i += 1;
            if i == 4 { 1.0 } else { 0.0 }
        })
        .unwrap();
        assert_eq!(idx, 3);
        assert!(matches!(rerank(&[], Mode::Word, |_| 0.0), Err(BlmError::NoCandidates)));
    }

    #[test]
    fn restore_requires_length_model_and_annotations() {
        let plain = tiny_model(&["a"], Variant::Plain, 0);
        let c = Canvas::from_items(vec![CanvasItem::Blank(Some(2))]);
        assert!(restore_fill(&plain, &c, &DecodeConfig::default()).is_err());
        let la = tiny_model(&["a"], Variant::LengthAware, 0);
        assert!(restore_fill(&la, &Canvas::initial(), &DecodeConfig::default()).is_err());
        let long = Canvas::from_items(vec![CanvasItem::Blank(Some(9))]);
        assert!(matches!(
            restore_fill(&la, &long, &DecodeConfig::default()),
            Err(BlmError::LengthTooLarge { .. })
        ));
    }

    #[test]
    fn ten_samples_with_an_external_scorer() {
        let m = tiny_model(&["a", "b", "c"], Variant::Plain, 3);
        let cfg = DecodeConfig {
            strategy: Strategy::Sample,
            samples: 10,
            seed: 4,
            ..DecodeConfig::default()
        };
        let hyps = decode(&m, &Canvas::initial(), &cfg).unwrap();
        assert_eq!(hyps.len(), 10);
        assert!(hyps.iter().all(Hypothesis::is_complete));
        let longest = hyps.iter().map(|h| h.canvas.len()).max().unwrap();
        let best = rerank(&hyps, Mode::Word, |text| text.split(' ').count() as f64).unwrap();
        assert_eq!(hyps[best].canvas.len(), longest);
    }

    #[test]
    fn restoration_conserves_slot_lengths() {
        let m = tiny_model(&["a", "b"], Variant::LengthAware, 6);
        let one = Canvas::from_items(vec![CanvasItem::Blank(Some(1))]);
        let h = restore_fill(&m, &one, &DecodeConfig::default()).unwrap();
        assert_eq!((h.trajectory.len(), h.canvas.len()), (1, 1));

        let b = m.vocab().token("b");
        let two = Canvas::from_items(vec![
            CanvasItem::Blank(Some(3)),
            CanvasItem::Word(b),
            CanvasItem::Blank(Some(2)),
        ]);
        let h = restore_fill(&m, &two, &DecodeConfig::default()).unwrap();
        assert_eq!(h.trajectory.len(), 5);
        assert_eq!(h.canvas.tokens().unwrap()[3].surface.as_ref(), "b");
        assert_eq!(h.canvas.len(), 6);
    }

    #[test]
    fn config_validation() {
        assert!(DecodeConfig::default().validate().is_ok());
        let bad = DecodeConfig {
            temperature: 0.0,
            ..DecodeConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("beam".parse::<Strategy>().unwrap(), Strategy::Beam);
        assert!("best".parse::<Strategy>().is_err());
    }
}
