use super::{Blm, Encoding};
use crate::autodiff::{Graph, Var};
use crate::canvas::{Action, Canvas, Split};
use crate::error::{BlmError, Result};
use crate::tensor::{Matrix, Real};

impl<F: Real> Blm<F> {
    /// `1 x k` log-probabilities of choosing each blank.
    pub fn blank_log_probs(&self, g: &mut Graph<'_, F>, enc: &Encoding) -> Result<Var> {
        if enc.blank_count() == 0 {
            return Err(BlmError::CompleteCanvas);
        }
        let zb = g.gather_rows(enc.z, enc.blank_items.clone());
        let u = g.param(self.layout.blank_u);
        let logits = g.matmul_bt(u, zb);
        Ok(g.log_softmax_rows(logits, None))
    }

    /// `blanks.len() x |V|` word log-probabilities; reserved ids get `-inf`.
    pub fn word_log_probs(&self, g: &mut Graph<'_, F>, enc: &Encoding, blanks: &[usize]) -> Var {
        let rows: Vec<usize> = blanks.iter().map(|&b| enc.blank_items[b]).collect();
        let zb = g.gather_rows(enc.z, rows);
        let w = g.param(self.layout.word_w);
        let logits = g.matmul_bt(zb, w);
        let v = self.vocab.len();
        let row_mask: Vec<bool> = (0..v as u32).map(|id| self.vocab.is_emittable(id)).collect();
        let mut mask = Vec::with_capacity(blanks.len() * v);
        for _ in blanks {
            mask.extend_from_slice(&row_mask);
        }
        g.log_softmax_rows(logits, Some(mask))
    }

    /// Split-head log-probabilities for `(blank, word id)` pairs: 4 flag
    /// classes for plain models, left lengths `0..t` (rest `-inf`) for
    /// length-aware ones.
    pub fn split_log_probs(
        &self,
        g: &mut Graph<'_, F>,
        enc: &Encoding,
        queries: &[(usize, u32)],
    ) -> Result<Var> {
        let rows: Vec<usize> = queries.iter().map(|&(b, _)| enc.blank_items[b]).collect();
        let words: Vec<usize> = queries.iter().map(|&(_, w)| w as usize).collect();
        let zb = g.gather_rows(enc.z, rows);
        let embed = g.param(self.layout.embed);
        let vw = g.gather_rows(embed, words);
        let h = g.concat_cols(vec![zb, vw]);
        let (w1, b1) = (g.param(self.layout.split_w1), g.param(self.layout.split_b1));
        let h = g.matmul(h, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let (w2, b2) = (g.param(self.layout.split_w2), g.param(self.layout.split_b2));
        let h = g.matmul(h, w2);
        let logits = g.add_row(h, b2);
        let classes = self.split_classes();
        let mask = match self.config.variant {
            crate::canvas::Variant::Plain => None,
            crate::canvas::Variant::LengthAware => {
                let mut mask = Vec::with_capacity(queries.len() * classes);
                for &(b, _) in queries {
                    let t = enc.blank_lengths[b].ok_or(BlmError::ActionKindMismatch(
                        "length-aware model needs length-annotated blanks",
                    ))?;
                    if t > classes {
                        return Err(BlmError::LengthTooLarge { len: t, max: classes });
                    }
                    mask.extend((0..classes).map(|l| l < t));
                }
                Some(mask)
            }
        };
        Ok(g.log_softmax_rows(logits, mask))
    }

    fn check_action(&self, enc: &Encoding, action: &Action) -> Result<()> {
        let k = enc.blank_count();
        if action.blank >= k {
            return Err(BlmError::BlankOutOfRange {
                index: action.blank,
                blanks: k,
            });
        }
        if action.word.id as usize >= self.vocab.len() {
            return Err(BlmError::UnknownId {
                id: action.word.id,
                size: self.vocab.len(),
            });
        }
        match (self.config.variant, action.split, enc.blank_lengths[action.blank]) {
            (crate::canvas::Variant::Plain, Split::Flags { .. }, None) => Ok(()),
            (crate::canvas::Variant::LengthAware, Split::LeftLen(l), Some(t)) => {
                if l < t {
                    Ok(())
                } else {
                    Err(BlmError::LeftLengthOutOfRange { left: l, len: t })
                }
            }
            _ => Err(BlmError::ActionKindMismatch(
                "action, blank, and model variant disagree",
            )),
        }
    }

    /// `Σ log p(a | c)` over `actions`, all scored from one encoding.
    pub fn actions_log_prob(
        &self,
        g: &mut Graph<'_, F>,
        enc: &Encoding,
        actions: &[&Action],
    ) -> Result<Var> {
        for a in actions {
            self.check_action(enc, a)?;
        }
        let blank_lp = self.blank_log_probs(g, enc)?;
        let blank_sum = g.pick_sum(blank_lp, actions.iter().map(|a| (0, a.blank)).collect());

        let mut used: Vec<usize> = actions.iter().map(|a| a.blank).collect();
        used.sort_unstable();
        used.dedup();
        let word_lp = self.word_log_probs(g, enc, &used);
        let word_picks = actions
            .iter()
            .map(|a| {
                let row = used.binary_search(&a.blank).expect("blank is listed");
                (row, a.word.id as usize)
            })
            .collect();
        let word_sum = g.pick_sum(word_lp, word_picks);

        let queries: Vec<(usize, u32)> = actions.iter().map(|a| (a.blank, a.word.id)).collect();
        let split_lp = self.split_log_probs(g, enc, &queries)?;
        let split_picks = actions
            .iter()
            .enumerate()
            .map(|(i, a)| match a.split {
                Split::Flags { .. } => (i, a.split.flag_class().expect("flags")),
                Split::LeftLen(l) => (i, l),
            })
            .collect();
        let split_sum = g.pick_sum(split_lp, split_picks);

        let s = g.add(blank_sum, word_sum);
        Ok(g.add(s, split_sum))
    }

    /// `log p(action | canvas)`.
    pub fn action_log_prob(&self, canvas: &Canvas, action: &Action) -> Result<F> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, canvas, None)?;
        let lp = self.actions_log_prob(&mut g, &enc, &[action])?;
        Ok(g.scalar(lp))
    }

    /// Runs the encoder once and exposes the blank and word distributions,
    /// with split scores computed on demand.
    pub fn score(&self, canvas: &Canvas) -> Result<CanvasScores<'_, F>> {
        let mut graph = Graph::new(&self.params);
        let enc = self.encode(&mut graph, canvas, None)?;
        let blank_var = self.blank_log_probs(&mut graph, &enc)?;
        let blank = graph.value(blank_var).data().to_vec();
        let all: Vec<usize> = (0..enc.blank_count()).collect();
        let word_var = self.word_log_probs(&mut graph, &enc, &all);
        let words = graph.value(word_var).clone();
        Ok(CanvasScores {
            model: self,
            graph,
            enc,
            blank,
            words,
        })
    }
}

/// Distributions for one canvas under a fixed model.
pub struct CanvasScores<'m, F: Real> {
    model: &'m Blm<F>,
    graph: Graph<'m, F>,
    enc: Encoding,
    /// `log p(b | c)` per blank.
    pub blank: Vec<F>,
    /// `log p(w | c, b)`, one row per blank.
    pub words: Matrix<F>,
}

impl<F: Real> CanvasScores<'_, F> {
    pub fn blank_count(&self) -> usize {
        self.blank.len()
    }

    pub fn blank_lengths(&self) -> &[Option<usize>] {
        &self.enc.blank_lengths
    }

    /// Split-head log-probabilities, one row per `(blank, word id)` query.
    pub fn split(&mut self, queries: &[(usize, u32)]) -> Result<Matrix<F>> {
        if queries.is_empty() {
            return Ok(Matrix::zeros(0, self.model.split_classes()));
        }
        let v = self.model.split_log_probs(&mut self.graph, &self.enc, queries)?;
        Ok(self.graph.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::canvas::{CanvasItem, Token, Variant};
    use crate::model::test_support::*;
    use crate::tensor::log_sum_exp;

    fn zero_heads(m: &mut Blm<f64>) {
        let ids = [
            m.layout.blank_u,
            m.layout.word_w,
            m.layout.split_w1,
            m.layout.split_w2,
            m.layout.split_b2,
        ];
        let store: &mut ParamStore<f64> = m.params_mut();
        for id in ids {
            store.get_mut(id).scale(0.0);
        }
    }

    #[test]
    fn single_blank_uniform_heads() {
        let mut m = tiny_model(&["a", "b"], Variant::Plain, 5);
        zero_heads(&mut m);
        let a = Action::flags(0, m.vocab().token("a"), true, false);
        let lp = m.action_log_prob(&Canvas::initial(), &a).unwrap();
        // Words a, b and <unk> are emittable.
        let expected = (1.0f64 * (1.0 / 3.0) * 0.25).ln();
        assert!((lp - expected).abs() < 1e-12, "{lp} vs {expected}");
    }

    #[test]
    fn blank_choice_is_symmetric_with_zero_u() {
        let mut m = tiny_model(&["a"], Variant::Plain, 2);
        zero_heads(&mut m);
        let c = Canvas::from_items(vec![
            CanvasItem::Blank(None),
            CanvasItem::Word(m.vocab().token("a")),
            CanvasItem::Blank(None),
        ]);
        let s = m.score(&c).unwrap();
        assert_eq!(s.blank.len(), 2);
        for lp in &s.blank {
            assert!((lp - 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn reserved_words_have_zero_probability() {
        let m = tiny_model(&["a", "b"], Variant::Plain, 9);
        let s = m.score(&Canvas::initial()).unwrap();
        let row = s.words.row(0);
        for id in 0..m.vocab().len() as u32 {
            if !m.vocab().is_emittable(id) {
                assert_eq!(row[id as usize], f64::NEG_INFINITY);
            }
        }
        assert!((log_sum_exp(row.iter().copied())).abs() < 1e-12);
    }

    #[test]
    fn length_head_masks_to_blank_length() {
        let mut m = tiny_model(&["a", "b"], Variant::LengthAware, 4);
        let c = Canvas::from_items(vec![CanvasItem::Blank(Some(1))]);
        let a = m.vocab().token("a").id;
        let mut s = m.score(&c).unwrap();
        let split = s.split(&[(0, a)]).unwrap();
        assert!(split.get(0, 0).abs() < 1e-12, "t = 1 forces left length 0");

        zero_heads(&mut m);
        let c = Canvas::from_items(vec![CanvasItem::Blank(Some(4))]);
        let mut s = m.score(&c).unwrap();
        let split = s.split(&[(0, a)]).unwrap();
        for l in 0..4 {
            assert!((split.get(0, l) - 0.25f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_actions() {
        let m = tiny_model(&["a"], Variant::Plain, 1);
        let a = m.vocab().token("a");
        let c = Canvas::initial();
        assert!(m.action_log_prob(&c, &Action::left_len(0, a.clone(), 0)).is_err());
        assert!(m.action_log_prob(&c, &Action::flags(1, a, false, false)).is_err());
        assert!(m
            .action_log_prob(&c, &Action::flags(0, Token::new(500, "z"), false, false))
            .is_err());
        let done = Canvas::from_items(vec![CanvasItem::Word(m.vocab().token("a"))]);
        assert!(matches!(m.score(&done), Err(BlmError::CompleteCanvas)));
    }
}
