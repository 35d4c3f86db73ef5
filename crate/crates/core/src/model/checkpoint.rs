//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "BLMCKPT\0"
//! version      u32
//! d_model, layers, heads, d_ff, head_hidden, vocab_size    u32 each
//! mode u8 (0 word, 1 char), variant u8 (0 plain, 1 length-aware),
//! tie_output u8, padding u8
//! t_max, min_count                                         u32 each
//! dropout f64, init_seed u64
//! learned symbol count u32, then per symbol: byte length u32 + UTF-8
//! tensor count u32, then per tensor: name length u32 + UTF-8 name,
//!   rows u32, cols u32, rows*cols f32 values
//! crc32 of every preceding byte   u32
//! ```

use std::io::Write;
use std::path::Path;

use super::{Blm, ModelConfig};
use crate::autodiff::ParamStore;
use crate::canvas::Variant;
use crate::error::{BlmError, Result};
use crate::tensor::{Matrix, Real};
use crate::vocab::{Mode, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BLMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(BlmError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| BlmError::Checkpoint("invalid UTF-8".into()))
    }
}

impl<F: Real> Blm<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION as usize);
        for v in [c.d_model, c.layers, c.heads, c.d_ff, c.head_hidden, self.vocab.len()] {
            w.u32(v);
        }
        w.u8(match self.vocab.mode() {
            Mode::Word => 0,
            Mode::Char => 1,
        });
        w.u8(match c.variant {
            Variant::Plain => 0,
            Variant::LengthAware => 1,
        });
        w.u8(c.tie_output as u8);
        w.u8(0);
        w.u32(self.vocab.t_max());
        w.u32(self.vocab.min_count());
        w.0.extend_from_slice(&c.dropout.to_le_bytes());
        w.0.extend_from_slice(&c.init_seed.to_le_bytes());

        let learned: Vec<&str> = self.vocab.learned().collect();
        w.u32(learned.len());
        for s in learned {
            w.str(s);
        }
        w.u32(self.params.len());
        for (_, name, t) in self.params.iter() {
            w.str(name);
            w.u32(t.rows());
            w.u32(t.cols());
            for &x in t.data() {
                let x = x.to_f32().expect("finite parameter");
                w.0.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&w.0);
        w.0.extend_from_slice(&crc.to_le_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(BlmError::Checkpoint("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(BlmError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(BlmError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let d_model = r.u32()?;
        let layers = r.u32()?;
        let heads = r.u32()?;
        let d_ff = r.u32()?;
        let head_hidden = r.u32()?;
        let vocab_size = r.u32()?;
        let mode = match r.u8()? {
            0 => Mode::Word,
            1 => Mode::Char,
            m => return Err(BlmError::Checkpoint(format!("unknown mode tag {m}"))),
        };
        let variant = match r.u8()? {
            0 => Variant::Plain,
            1 => Variant::LengthAware,
            v => return Err(BlmError::Checkpoint(format!("unknown variant tag {v}"))),
        };
        let tie_output = r.u8()? != 0;
        r.u8()?;
        let t_max = r.u32()?;
        let min_count = r.u32()?;
        let dropout = f64::from_bits(r.u64()?);
        let init_seed = r.u64()?;

        let n_learned = r.u32()?;
        let learned = (0..n_learned).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_words(mode, t_max, min_count, &learned);
        if vocab.len() != vocab_size {
            return Err(BlmError::Checkpoint(format!(
                "vocabulary has {} entries, header says {vocab_size}",
                vocab.len()
            )));
        }

        let n_tensors = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..n_tensors {
            let name = r.str()?;
            let rows = r.u32()?;
            let cols = r.u32()?;
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| F::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect();
            store.add(name, Matrix::from_vec(rows, cols, data));
        }
        if r.pos != body.len() {
            return Err(BlmError::Checkpoint("trailing bytes".into()));
        }
        let config = ModelConfig {
            d_model,
            layers,
            heads,
            d_ff,
            head_hidden,
            dropout,
            tie_output,
            variant,
            init_seed,
        };
        Blm::from_parts(config, vocab, store)
    }

    /// Writes the checkpoint atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fails unless the model was trained for `mode` and `variant`.
    pub fn ensure_mode(&self, mode: Mode, variant: Variant) -> Result<()> {
        if self.vocab.mode() != mode || self.config.variant != variant {
            return Err(BlmError::ModeMismatch {
                expected: format!("{} / {}", mode.as_str(), variant.as_str()),
                found: format!(
                    "{} / {}",
                    self.vocab.mode().as_str(),
                    self.config.variant.as_str()
                ),
            });
        }
        Ok(())
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| BlmError::Io(e.error))?;
    Ok(())
}
