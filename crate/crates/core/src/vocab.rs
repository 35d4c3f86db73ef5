//! Vocabulary and tokenization.
//!
//! Ids `0..RESERVED` are fixed: the blank marker, the unknown token, then one
//! length token `[t]` for every `t` in `1..=t_max`. Learned symbols follow.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::canvas::{Token, BLANK_MARKER};
use crate::error::{BlmError, Result};

pub const BLANK_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const UNK_SURFACE: &str = "<unk>";
const FIRST_LENGTH_ID: u32 = 2;

/// Default largest length annotation a length-aware blank may carry.
pub const DEFAULT_T_MAX: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Word,
    Char,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Word => "word",
            Mode::Char => "char",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = BlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Mode::Word),
            "char" => Ok(Mode::Char),
            other => Err(BlmError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    mode: Mode,
    t_max: usize,
    min_count: usize,
    surfaces: Vec<Arc<str>>,
    index: HashMap<Arc<str>, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode
            && self.t_max == other.t_max
            && self.min_count == other.min_count
            && self.surfaces == other.surfaces
    }
}

impl Vocabulary {
    /// A vocabulary with the reserved entries plus `words`, in order.
    /// Duplicates and words that collide with reserved surfaces are skipped.
    pub fn from_words<S: AsRef<str>>(
        mode: Mode,
        t_max: usize,
        min_count: usize,
        words: impl IntoIterator<Item = S>,
    ) -> Self {
        let mut surfaces: Vec<Arc<str>> = Vec::new();
        surfaces.push(Arc::from(BLANK_MARKER));
        surfaces.push(Arc::from(UNK_SURFACE));
        for t in 1..=t_max {
            surfaces.push(Arc::from(format!("[{t}]")));
        }
        let mut vocab = Self {
            mode,
            t_max,
            min_count,
            surfaces,
            index: HashMap::new(),
        };
        for w in words {
            let w = w.as_ref();
            if w == BLANK_MARKER || w == UNK_SURFACE || vocab.index.contains_key(w) {
                continue;
            }
            let id = vocab.surfaces.len() as u32;
            let s: Arc<str> = Arc::from(w);
            vocab.surfaces.push(s.clone());
            vocab.index.insert(s, id);
        }
        vocab
    }

    /// Builds a vocabulary from documents. Word mode keeps whitespace tokens
    /// seen at least `min_count` times, most frequent first; char mode keeps
    /// every observed character.
    pub fn build<S: AsRef<str>>(
        docs: &[S],
        min_count: usize,
        mode: Mode,
        t_max: usize,
    ) -> Result<Self> {
        if docs.iter().all(|d| d.as_ref().trim().is_empty()) {
            return Err(BlmError::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            match mode {
                Mode::Word => {
                    for w in doc.as_ref().split_whitespace() {
                        *counts.entry(w.to_string()).or_default() += 1;
                    }
                }
                Mode::Char => {
                    for c in doc.as_ref().chars() {
                        *counts.entry(c.to_string()).or_default() += 1;
                    }
                }
            }
        }
        let threshold = match mode {
            Mode::Word => min_count.max(1),
            Mode::Char => 1,
        };
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= threshold).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_words(
            mode,
            t_max,
            threshold,
            kept.into_iter().map(|(w, _)| w),
        ))
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    /// Number of reserved ids (blank, unknown, length tokens).
    pub fn reserved(&self) -> usize {
        FIRST_LENGTH_ID as usize + self.t_max
    }

    /// Ids a model may emit as words: the unknown token and every learned symbol.
    pub fn is_emittable(&self, id: u32) -> bool {
        id == UNK_ID || (id as usize) >= self.reserved()
    }

    pub fn length_id(&self, t: usize) -> Result<u32> {
        if t == 0 || t > self.t_max {
            return Err(BlmError::LengthTooLarge {
                len: t,
                max: self.t_max,
            });
        }
        Ok(FIRST_LENGTH_ID + t as u32 - 1)
    }

    /// Learned symbols in id order.
    pub fn learned(&self) -> impl Iterator<Item = &str> {
        self.surfaces[self.reserved()..].iter().map(|s| &**s)
    }

    pub fn id(&self, surface: &str) -> u32 {
        if surface == UNK_SURFACE {
            return UNK_ID;
        }
        self.index.get(surface).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.index.contains_key(surface)
    }

    /// Token for a surface; unknown symbols keep their text and get [`UNK_ID`].
    pub fn token(&self, surface: &str) -> Token {
        match self.index.get_key_value(surface) {
            Some((s, &id)) => Token {
                id,
                surface: s.clone(),
            },
            None if surface == UNK_SURFACE => self.token_for_id(UNK_ID),
            None => Token::new(UNK_ID, surface),
        }
    }

    pub fn token_for_id(&self, id: u32) -> Token {
        Token {
            id,
            surface: self.surfaces[id as usize].clone(),
        }
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.surfaces[id as usize]
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        match self.mode {
            Mode::Word => text.split_whitespace().map(|w| self.token(w)).collect(),
            Mode::Char => {
                let mut buf = [0u8; 4];
                text.trim_end_matches(['\n', '\r'])
                    .chars()
                    .map(|c| self.token(c.encode_utf8(&mut buf)))
                    .collect()
            }
        }
    }

    pub fn detokenize(&self, tokens: &[Token]) -> String {
        let sep = match self.mode {
            Mode::Word => " ",
            Mode::Char => "",
        };
        tokens
            .iter()
            .map(|t| &*t.surface)
            .collect::<Vec<_>>()
            .join(sep)
    }
}
