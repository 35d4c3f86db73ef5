//! The blank language model scorer.
//!
//! A transformer encoder maps the canvas to one vector per item. The action
//! distribution factorizes into three heads read at blank positions:
//! a blank choice (`softmax(u · z)` over blanks), a word choice
//! (`softmax(W z_b)` over the vocabulary), and a split head, an MLP over
//! `[z_b ; v_w]` that predicts the left/right blank flags (4 classes) or, for
//! length-aware models, the left length masked to `0..t`.

mod checkpoint;
mod encoder;
mod heads;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{write_atomic, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::Encoding;
pub use heads::CanvasScores;

use crate::autodiff::{ParamId, ParamStore};
use crate::canvas::Variant;
use crate::error::{BlmError, Result};
use crate::tensor::{Matrix, Real};
use crate::vocab::Vocabulary;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Hidden width of the split MLP.
    pub head_hidden: usize,
    pub dropout: f64,
    /// Share the word projection with the input embedding.
    pub tie_output: bool,
    pub variant: Variant,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            layers: 4,
            heads: 4,
            d_ff: 512,
            head_hidden: 512,
            dropout: 0.1,
            tie_output: false,
            variant: Variant::Plain,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 || self.head_hidden == 0 {
            return Err(BlmError::Config("dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(BlmError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(BlmError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    layers: Vec<LayerParams>,
    blank_u: ParamId,
    word_w: ParamId,
    split_w1: ParamId,
    split_b1: ParamId,
    split_w2: ParamId,
    split_b2: ParamId,
}

impl Layout {
    fn resolve<F: Real>(store: &ParamStore<F>, cfg: &ModelConfig) -> Result<Self> {
        let get = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| BlmError::Checkpoint(format!("missing tensor `{name}`")))
        };
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = |s: &str| get(&format!("layer{i}.{s}"));
                Ok(LayerParams {
                    wq: p("attn.wq")?,
                    bq: p("attn.bq")?,
                    wk: p("attn.wk")?,
                    bk: p("attn.bk")?,
                    wv: p("attn.wv")?,
                    bv: p("attn.bv")?,
                    wo: p("attn.wo")?,
                    bo: p("attn.bo")?,
                    ln1_g: p("ln1.gain")?,
                    ln1_b: p("ln1.bias")?,
                    w1: p("ff.w1")?,
                    b1: p("ff.b1")?,
                    w2: p("ff.w2")?,
                    b2: p("ff.b2")?,
                    ln2_g: p("ln2.gain")?,
                    ln2_b: p("ln2.bias")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let embed = get("embed")?;
        Ok(Self {
            embed,
            layers,
            blank_u: get("blank.u")?,
            word_w: if cfg.tie_output { embed } else { get("word.w")? },
            split_w1: get("split.w1")?,
            split_b1: get("split.b1")?,
            split_w2: get("split.w2")?,
            split_b2: get("split.b2")?,
        })
    }
}

/// Model parameters, their layout, and the vocabulary they index.
#[derive(Clone, Debug)]
pub struct Blm<F> {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore<F>,
    layout: Layout,
}

fn uniform<F: Real>(rows: usize, cols: usize, limit: f64, rng: &mut ChaCha8Rng) -> Matrix<F> {
    Matrix::from_fn(rows, cols, |_, _| F::of(rng.gen_range(-limit..limit)))
}

fn xavier<F: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<F> {
    uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

impl<F: Real> Blm<F> {
    /// Freshly initialized model, deterministic in `config.init_seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        // Embeddings have variance 1/d so that the sqrt(d) input scaling gives unit scale.
        store.add("embed", uniform(v, d, (3.0 / d as f64).sqrt(), &mut rng));
        for i in 0..config.layers {
            let name = |s: &str| format!("layer{i}.{s}");
            for w in ["wq", "wk", "wv", "wo"] {
                store.add(name(&format!("attn.{w}")), xavier(d, d, &mut rng));
                let b = w.replacen('w', "b", 1);
                store.add(name(&format!("attn.{b}")), Matrix::zeros(1, d));
            }
            store.add(name("ln1.gain"), Matrix::filled(1, d, F::one()));
            store.add(name("ln1.bias"), Matrix::zeros(1, d));
            store.add(name("ff.w1"), xavier(d, config.d_ff, &mut rng));
            store.add(name("ff.b1"), Matrix::zeros(1, config.d_ff));
            store.add(name("ff.w2"), xavier(config.d_ff, d, &mut rng));
            store.add(name("ff.b2"), Matrix::zeros(1, d));
            store.add(name("ln2.gain"), Matrix::filled(1, d, F::one()));
            store.add(name("ln2.bias"), Matrix::zeros(1, d));
        }
        store.add("blank.u", xavier(1, d, &mut rng));
        if !config.tie_output {
            store.add("word.w", uniform(v, d, (3.0 / d as f64).sqrt(), &mut rng));
        }
        let out = match config.variant {
            Variant::Plain => 4,
            Variant::LengthAware => vocab.t_max(),
        };
        store.add("split.w1", xavier(2 * d, config.head_hidden, &mut rng));
        store.add("split.b1", Matrix::zeros(1, config.head_hidden));
        store.add("split.w2", xavier(config.head_hidden, out, &mut rng));
        store.add("split.b2", Matrix::zeros(1, out));
        Self::from_parts(config, vocab, store)
    }

    /// Assembles a model from existing tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&params, &config)?;
        let model = Self {
            config,
            vocab,
            params,
            layout,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.config.d_model;
        let v = self.vocab.len();
        let expect = |id: ParamId, shape: (usize, usize)| {
            let got = self.params.get(id).shape();
            if got == shape {
                Ok(())
            } else {
                Err(BlmError::Checkpoint(format!(
                    "tensor `{}` has shape {got:?}, expected {shape:?}",
                    self.params.name(id)
                )))
            }
        };
        let l = &self.layout;
        expect(l.embed, (v, d))?;
        expect(l.word_w, (v, d))?;
        expect(l.blank_u, (1, d))?;
        for layer in &l.layers {
            for id in [layer.wq, layer.wk, layer.wv, layer.wo] {
                expect(id, (d, d))?;
            }
            for id in [
                layer.bq, layer.bk, layer.bv, layer.bo, layer.ln1_g, layer.ln1_b, layer.b2,
                layer.ln2_g, layer.ln2_b,
            ] {
                expect(id, (1, d))?;
            }
            expect(layer.w1, (d, self.config.d_ff))?;
            expect(layer.b1, (1, self.config.d_ff))?;
            expect(layer.w2, (self.config.d_ff, d))?;
        }
        expect(l.split_w1, (2 * d, self.config.head_hidden))?;
        expect(l.split_b1, (1, self.config.head_hidden))?;
        expect(l.split_w2, (self.config.head_hidden, self.split_classes()))?;
        expect(l.split_b2, (1, self.split_classes()))?;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    /// Exclusive access for optimizer updates.
    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Output width of the split head.
    /// Dropout rate used when encoding with an rng.
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(BlmError::Config(format!("dropout {rate} not in [0, 1)")));
        }
        self.config.dropout = rate;
        Ok(())
    }

    pub fn split_classes(&self) -> usize {
        match self.config.variant {
            Variant::Plain => 4,
            Variant::LengthAware => self.vocab.t_max(),
        }
    }

    /// Same architecture and weights in another float type.
    pub fn cast<G: Real>(&self) -> Blm<G> {
        Blm {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }
}
