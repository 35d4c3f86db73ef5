use rand::RngCore;

use super::Blm;
use crate::autodiff::{Graph, Var};
use crate::canvas::{Canvas, CanvasItem};
use crate::error::{BlmError, Result};
use crate::tensor::{Matrix, Real};
use crate::vocab::BLANK_ID;

/// Output of the encoder for one canvas.
#[derive(Clone, Debug)]
pub struct Encoding {
    /// `items x d` representations.
    pub z: Var,
    /// Item position of each blank.
    pub blank_items: Vec<usize>,
    /// Length annotation of each blank.
    pub blank_lengths: Vec<Option<usize>>,
}

impl Encoding {
    pub fn blank_count(&self) -> usize {
        self.blank_items.len()
    }
}

/// Sinusoidal positions over the current canvas length.
fn positions<F: Real>(len: usize, d: usize) -> Matrix<F> {
    Matrix::from_fn(len, d, |pos, i| {
        let freq = (10_000f64).powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 / freq;
        F::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<F: Real> Blm<F> {
    /// Vocabulary id fed to the encoder for each item.
    pub fn item_ids(&self, canvas: &Canvas) -> Result<Vec<usize>> {
        let size = self.vocab.len();
        canvas
            .items()
            .iter()
            .map(|item| match item {
                CanvasItem::Word(t) if (t.id as usize) < size => Ok(t.id as usize),
                CanvasItem::Word(t) => Err(BlmError::UnknownId { id: t.id, size }),
                CanvasItem::Blank(None) => Ok(BLANK_ID as usize),
                CanvasItem::Blank(Some(len)) => self.vocab.length_id(*len).map(|id| id as usize),
            })
            .collect()
    }

    /// Encodes `canvas`; dropout is applied only when `rng` is given.
    pub fn encode(
        &self,
        g: &mut Graph<'_, F>,
        canvas: &Canvas,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Encoding> {
        if canvas.is_empty() {
            return Err(BlmError::EmptyCanvas);
        }
        let ids = self.item_ids(canvas)?;
        let d = self.config.d_model;
        let rate = if rng.is_some() { self.config.dropout } else { 0.0 };

        let embed = g.param(self.layout.embed);
        let x = g.gather_rows(embed, ids);
        let x = g.affine(x, F::of((d as f64).sqrt()), F::zero());
        let pe = g.constant(positions(canvas.len(), d));
        let mut x = g.add(x, pe);
        if let Some(r) = rng.as_deref_mut() {
            x = g.dropout(x, rate, r);
        }

        let heads = self.config.heads;
        let dk = d / heads;
        let scale = F::of(1.0 / (dk as f64).sqrt());
        for layer in &self.layout.layers {
            let proj = |g: &mut Graph<'_, F>, w, b| {
                let wv = g.param(w);
                let bv = g.param(b);
                let h = g.matmul(x, wv);
                g.add_row(h, bv)
            };
            let q = proj(g, layer.wq, layer.bq);
            let k = proj(g, layer.wk, layer.bk);
            let v = proj(g, layer.wv, layer.bv);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice_cols(q, h * dk, dk);
                let kh = g.slice_cols(k, h * dk, dk);
                let vh = g.slice_cols(v, h * dk, dk);
                let s = g.matmul_bt(qh, kh);
                let s = g.affine(s, scale, F::zero());
                let p = g.softmax_rows(s);
                outs.push(g.matmul(p, vh));
            }
            let o = if heads == 1 { outs[0] } else { g.concat_cols(outs) };
            let wo = g.param(layer.wo);
            let bo = g.param(layer.bo);
            let o = g.matmul(o, wo);
            let mut o = g.add_row(o, bo);
            if let Some(r) = rng.as_deref_mut() {
                o = g.dropout(o, rate, r);
            }
            let res = g.add(x, o);
            let (lg, lb) = (g.param(layer.ln1_g), g.param(layer.ln1_b));
            x = g.layer_norm(res, lg, lb);

            let (w1, b1) = (g.param(layer.w1), g.param(layer.b1));
            let f = g.matmul(x, w1);
            let f = g.add_row(f, b1);
            let f = g.relu(f);
            let (w2, b2) = (g.param(layer.w2), g.param(layer.b2));
            let f = g.matmul(f, w2);
            let mut f = g.add_row(f, b2);
            if let Some(r) = rng.as_deref_mut() {
                f = g.dropout(f, rate, r);
            }
            let res = g.add(x, f);
            let (lg, lb) = (g.param(layer.ln2_g), g.param(layer.ln2_b));
            x = g.layer_norm(res, lg, lb);
        }

        Ok(Encoding {
            z: x,
            blank_items: canvas.blank_locations(),
            blank_lengths: canvas.blank_lengths(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::canvas::{Token, Variant};
    use crate::model::test_support::tiny_model;

    #[test]
    fn one_vector_per_item() {
        let m = tiny_model(&["a", "b", "is"], Variant::Plain, 1);
        let mut g = Graph::new(m.params());
        let enc = m.encode(&mut g, &Canvas::initial(), None).unwrap();
        assert_eq!(g.value(enc.z).shape(), (1, 8));

        let is = m.vocab().token("is");
        let c = Canvas::from_items(vec![
            CanvasItem::Blank(None),
            CanvasItem::Word(is),
            CanvasItem::Blank(None),
        ]);
        let enc = m.encode(&mut g, &c, None).unwrap();
        assert_eq!(g.value(enc.z).shape(), (3, 8));
        assert_eq!(enc.blank_items, vec![0, 2]);
    }

    #[test]
    fn deterministic_without_dropout() {
        let m = tiny_model(&["a", "b"], Variant::Plain, 1);
        let c = Canvas::from_items(vec![
            CanvasItem::Word(m.vocab().token("a")),
            CanvasItem::Blank(None),
        ]);
        let run = || {
            let mut g = Graph::new(m.params());
            let enc = m.encode(&mut g, &c, None).unwrap();
            g.value(enc.z).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny_model(&["a"], Variant::LengthAware, 1);
        let mut g = Graph::new(m.params());
        assert!(matches!(
            m.encode(&mut g, &Canvas::default(), None),
            Err(BlmError::EmptyCanvas)
        ));
        let c = Canvas::from_items(vec![CanvasItem::Word(Token::new(999, "x"))]);
        assert!(matches!(
            m.encode(&mut g, &c, None),
            Err(BlmError::UnknownId { id: 999, .. })
        ));
        let c = Canvas::from_items(vec![CanvasItem::Blank(Some(5))]);
        assert!(matches!(
            m.encode(&mut g, &c, None),
            Err(BlmError::LengthTooLarge { len: 5, max: 4 })
        ));
    }
}
