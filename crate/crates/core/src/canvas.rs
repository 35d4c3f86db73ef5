//! The canvas: fixed tokens interleaved with blanks, and the actions that
//! rewrite it.
//!
//! Every action replaces one blank by a word plus optional neighbouring
//! blanks (`_ -> _? w _?`). In the length-aware variant a blank carries the
//! exact number of tokens it must still produce, and the action chooses how
//! many of those go to the left of the placed word.
//!
//! Blank indices are 0-based and positional: the `i`-th blank from the left,
//! recomputed after each action.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{BlmError, Result};
use crate::vocab::{Mode, Vocabulary};

/// Literal blank marker in word-mode templates.
pub const BLANK_MARKER: &str = "__";
/// Character marking one missing character in char-mode templates.
pub const MISSING_CHAR: char = '?';

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    pub id: u32,
    pub surface: Arc<str>,
}

impl Token {
    pub fn new(id: u32, surface: impl Into<Arc<str>>) -> Self {
        Self {
            id,
            surface: surface.into(),
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface)
    }
}

/// Which blank grammar a model and its canvases use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Unbounded blanks, actions carry left/right blank flags.
    Plain,
    /// Length-annotated blanks, actions carry the left length.
    LengthAware,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::LengthAware => "length-aware",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = BlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "blm" => Ok(Variant::Plain),
            "length-aware" | "lblm" => Ok(Variant::LengthAware),
            other => Err(BlmError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum CanvasItem {
    Word(Token),
    /// `None` is an unbounded blank; `Some(t)` must produce exactly `t >= 1` tokens.
    Blank(Option<usize>),
}

impl CanvasItem {
    pub fn is_blank(&self) -> bool {
        matches!(self, CanvasItem::Blank(_))
    }
}

/// How the placed word splits its blank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Flags { left: bool, right: bool },
    /// Length-aware: tokens left of the word; the right side gets `t - 1 - left`.
    LeftLen(usize),
}

impl Split {
    /// Class index of the left/right head: `2 * left + right`.
    pub fn flag_class(self) -> Option<usize> {
        match self {
            Split::Flags { left, right } => Some(2 * left as usize + right as usize),
            Split::LeftLen(_) => None,
        }
    }

    pub fn from_flag_class(class: usize) -> Self {
        debug_assert!(class < 4);
        Split::Flags {
            left: class & 2 != 0,
            right: class & 1 != 0,
        }
    }

    /// Number of blanks this split creates.
    pub fn new_blanks(self, blank_len: Option<usize>) -> usize {
        match (self, blank_len) {
            (Split::Flags { left, right }, _) => left as usize + right as usize,
            (Split::LeftLen(l), Some(t)) => (l > 0) as usize + (t - 1 - l > 0) as usize,
            (Split::LeftLen(_), None) => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Action {
    pub blank: usize,
    pub word: Token,
    pub split: Split,
}

impl Action {
    pub fn flags(blank: usize, word: Token, left: bool, right: bool) -> Self {
        Self {
            blank,
            word,
            split: Split::Flags { left, right },
        }
    }

    pub fn left_len(blank: usize, word: Token, left: usize) -> Self {
        Self {
            blank,
            word,
            split: Split::LeftLen(left),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let yn = |b: bool| if b { "yes" } else { "no" };
        match self.split {
            Split::Flags { left, right } => write!(
                f,
                "blank #{} word {:?} left {} right {}",
                self.blank + 1,
                &*self.word.surface,
                yn(left),
                yn(right)
            ),
            Split::LeftLen(l) => write!(
                f,
                "blank #{} word {:?} left length {}",
                self.blank + 1,
                &*self.word.surface,
                l
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Canvas {
    items: Vec<CanvasItem>,
}

impl Canvas {
    /// A single unbounded blank: where plain generation starts.
    pub fn initial() -> Self {
        Self {
            items: vec![CanvasItem::Blank(None)],
        }
    }

    /// The starting canvas for a variant and target length.
    pub fn initial_for(variant: Variant, len: usize) -> Self {
        match variant {
            Variant::Plain => Self::initial(),
            Variant::LengthAware => Self {
                items: vec![CanvasItem::Blank(Some(len))],
            },
        }
    }

    pub fn from_items(items: Vec<CanvasItem>) -> Self {
        Self { items }
    }

    pub fn from_tokens(tokens: &[Token]) -> Self {
        Self {
            items: tokens.iter().cloned().map(CanvasItem::Word).collect(),
        }
    }

    pub fn items(&self) -> &[CanvasItem] {
        &self.items
    }

    pub fn into_items(self) -> Vec<CanvasItem> {
        self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn blank_count(&self) -> usize {
        self.items.iter().filter(|i| i.is_blank()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.blank_count() == 0
    }

    pub fn word_count(&self) -> usize {
        self.items.len() - self.blank_count()
    }

    /// Item positions of the blanks, ascending.
    pub fn blank_locations(&self) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, i)| i.is_blank())
            .map(|(p, _)| p)
            .collect()
    }

    /// Length annotation of each blank, left to right.
    pub fn blank_lengths(&self) -> Vec<Option<usize>> {
        self.items
            .iter()
            .filter_map(|i| match i {
                CanvasItem::Blank(t) => Some(*t),
                CanvasItem::Word(_) => None,
            })
            .collect()
    }

    /// Placed words in order.
    pub fn words(&self) -> impl Iterator<Item = &Token> {
        self.items.iter().filter_map(|i| match i {
            CanvasItem::Word(t) => Some(t),
            CanvasItem::Blank(_) => None,
        })
    }

    /// The words of a complete canvas.
    pub fn tokens(&self) -> Option<Vec<Token>> {
        self.is_complete().then(|| self.words().cloned().collect())
    }

    /// Checks that `action` can be applied and returns the item position of its blank.
    pub fn check(&self, action: &Action) -> Result<usize> {
        let locations = self.blank_locations();
        let pos = *locations.get(action.blank).ok_or(BlmError::BlankOutOfRange {
            index: action.blank,
            blanks: locations.len(),
        })?;
        match (&self.items[pos], action.split) {
            (CanvasItem::Blank(None), Split::Flags { .. }) => Ok(pos),
            (CanvasItem::Blank(Some(t)), Split::LeftLen(l)) => {
                if l < *t {
                    Ok(pos)
                } else {
                    Err(BlmError::LeftLengthOutOfRange { left: l, len: *t })
                }
            }
            (CanvasItem::Blank(None), Split::LeftLen(_)) => Err(BlmError::ActionKindMismatch(
                "left length given for an unbounded blank",
            )),
            (CanvasItem::Blank(Some(_)), Split::Flags { .. }) => Err(
                BlmError::ActionKindMismatch("blank flags given for a length-annotated blank"),
            ),
            (CanvasItem::Word(_), _) => unreachable!("blank location points at a word"),
        }
    }

    /// Rewrites the selected blank; the receiver is left untouched.
    pub fn apply(&self, action: &Action) -> Result<Canvas> {
        let pos = self.check(action)?;
        let mut replacement = Vec::with_capacity(3);
        match (action.split, &self.items[pos]) {
            (Split::Flags { left, right }, _) => {
                if left {
                    replacement.push(CanvasItem::Blank(None));
                }
                replacement.push(CanvasItem::Word(action.word.clone()));
                if right {
                    replacement.push(CanvasItem::Blank(None));
                }
            }
            (Split::LeftLen(l), CanvasItem::Blank(Some(t))) => {
                let r = t - 1 - l;
                if l > 0 {
                    replacement.push(CanvasItem::Blank(Some(l)));
                }
                replacement.push(CanvasItem::Word(action.word.clone()));
                if r > 0 {
                    replacement.push(CanvasItem::Blank(Some(r)));
                }
            }
            _ => unreachable!("checked above"),
        }
        let mut items = Vec::with_capacity(self.items.len() + 2);
        items.extend_from_slice(&self.items[..pos]);
        items.extend(replacement);
        items.extend_from_slice(&self.items[pos + 1..]);
        Ok(Canvas { items })
    }

    /// True when no two unbounded blanks are adjacent.
    pub fn is_normalized(&self) -> bool {
        !self.items.windows(2).any(|w| {
            matches!(
                (&w[0], &w[1]),
                (CanvasItem::Blank(None), CanvasItem::Blank(None))
            )
        })
    }

    /// Merges runs of adjacent unbounded blanks.
    pub fn normalized(mut self) -> Canvas {
        self.items.dedup_by(|b, a| {
            matches!(
                (&*a, &*b),
                (CanvasItem::Blank(None), CanvasItem::Blank(None))
            )
        });
        self
    }

    /// Rejects length annotations above `t_max`.
    pub fn check_lengths(&self, t_max: usize) -> Result<()> {
        for t in self.blank_lengths().into_iter().flatten() {
            if t > t_max {
                return Err(BlmError::LengthTooLarge { len: t, max: t_max });
            }
        }
        Ok(())
    }

    /// Text form: word mode joins with single spaces and writes blanks as
    /// `__`; char mode concatenates and writes `Blank(t)` as `t` question marks.
    pub fn render(&self, mode: Mode) -> String {
        let mut out = String::new();
        for (i, item) in self.items.iter().enumerate() {
            if mode == Mode::Word && i > 0 {
                out.push(' ');
            }
            match item {
                CanvasItem::Word(t) => out.push_str(&t.surface),
                CanvasItem::Blank(None) => out.push_str(BLANK_MARKER),
                CanvasItem::Blank(Some(t)) => {
                    out.extend(std::iter::repeat(MISSING_CHAR).take(*t));
                }
            }
        }
        out
    }
}

/// Parses a template line.
///
/// Word mode splits on whitespace; `__` is a blank and any other all-underscore
/// token is rejected. Adjacent blanks are merged unless `strict`, in which case
/// they are an error. Char mode turns each maximal run of `t` question marks
/// into a blank of length `t`. Out-of-vocabulary symbols keep their surface
/// and get the unknown id.
pub fn parse_template(text: &str, vocab: &Vocabulary, strict: bool) -> Result<Canvas> {
    let mut items = Vec::new();
    match vocab.mode() {
        Mode::Word => {
            for piece in text.split_whitespace() {
                if piece == BLANK_MARKER {
                    if strict && matches!(items.last(), Some(CanvasItem::Blank(None))) {
                        return Err(BlmError::MalformedTemplate(
                            "adjacent blanks".to_string(),
                        ));
                    }
                    items.push(CanvasItem::Blank(None));
                } else if piece.chars().all(|c| c == '_') {
                    return Err(BlmError::MalformedTemplate(format!(
                        "`{piece}` is not a blank marker (use `{BLANK_MARKER}`)"
                    )));
                } else {
                    items.push(CanvasItem::Word(vocab.token(piece)));
                }
            }
        }
        Mode::Char => {
            let text = text.trim_end_matches(['\n', '\r']);
            let mut run = 0usize;
            for ch in text.chars() {
                if ch == MISSING_CHAR {
                    run += 1;
                    continue;
                }
                if run > 0 {
                    items.push(CanvasItem::Blank(Some(run)));
                    run = 0;
                }
                let mut buf = [0u8; 4];
                items.push(CanvasItem::Word(vocab.token(ch.encode_utf8(&mut buf))));
            }
            if run > 0 {
                items.push(CanvasItem::Blank(Some(run)));
            }
        }
    }
    if items.is_empty() {
        log::warn!("empty template yields an empty complete canvas");
    }
    Ok(Canvas { items }.normalized())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> CanvasItem {
        CanvasItem::Word(Token::new(10, s))
    }

    fn tok(s: &str) -> Token {
        Token::new(10, s)
    }

    const B: CanvasItem = CanvasItem::Blank(None);

    #[test]
    fn initial_canvas_is_one_blank() {
        let c = Canvas::initial();
        assert_eq!(c.items(), &[B]);
        assert_eq!(c.render(Mode::Word), "__");
        assert_eq!(c.blank_count(), 1);
    }

    #[test]
    fn apply_matches_worked_example() {
        let c = Canvas::initial()
            .apply(&Action::flags(0, tok("is"), true, true))
            .unwrap();
        assert_eq!(c.items(), &[B, w("is"), B]);
        let c = Canvas::from_items(vec![w("customer"), B, w("is"), B]);
        let c = c.apply(&Action::flags(1, tok("awesome"), false, false)).unwrap();
        assert_eq!(c.items(), &[w("customer"), B, w("is"), w("awesome")]);
    }

    #[test]
    fn length_blank_split() {
        let c = Canvas::from_items(vec![CanvasItem::Blank(Some(3))]);
        let out = c.apply(&Action::left_len(0, tok("α"), 2)).unwrap();
        assert_eq!(out.items(), &[CanvasItem::Blank(Some(2)), w("α")]);
        let out = c.apply(&Action::left_len(0, tok("α"), 1)).unwrap();
        assert_eq!(
            out.items(),
            &[CanvasItem::Blank(Some(1)), w("α"), CanvasItem::Blank(Some(1))]
        );
        assert!(matches!(
            c.apply(&Action::left_len(0, tok("α"), 3)),
            Err(BlmError::LeftLengthOutOfRange { left: 3, len: 3 })
        ));
    }

    #[test]
    fn invalid_actions_are_rejected() {
        let c = Canvas::initial();
        assert!(matches!(
            c.apply(&Action::flags(1, tok("x"), false, false)),
            Err(BlmError::BlankOutOfRange { index: 1, blanks: 1 })
        ));
        assert!(matches!(
            c.apply(&Action::left_len(0, tok("x"), 0)),
            Err(BlmError::ActionKindMismatch(_))
        ));
        let done = Canvas::from_items(vec![w("a")]);
        assert!(done.apply(&Action::flags(0, tok("x"), false, false)).is_err());
    }

    #[test]
    fn blank_locations_ascend() {
        assert_eq!(Canvas::from_items(vec![B, w("is"), B]).blank_locations(), vec![0, 2]);
        assert!(Canvas::from_items(vec![w("a"), w("b")]).blank_locations().is_empty());
        let c = Canvas::from_items(vec![CanvasItem::Blank(Some(2)), w("x"), B]);
        assert_eq!(c.blank_locations(), vec![0, 2]);
    }

    #[test]
    fn rendering() {
        let c = Canvas::from_items(vec![w("customer"), w("service"), w("is"), w("awesome")]);
        assert_eq!(c.render(Mode::Word), "customer service is awesome");
        assert_eq!(
            Canvas::from_items(vec![CanvasItem::Blank(Some(3))]).render(Mode::Char),
            "???"
        );
        let c = Canvas::from_items(vec![w("a"), CanvasItem::Blank(Some(2)), w("b")]);
        assert_eq!(c.render(Mode::Char), "a??b");
    }

    #[test]
    fn normalization_merges_adjacent_blanks() {
        let c = Canvas::from_items(vec![B, B, w("x"), B, B, B]);
        assert!(!c.is_normalized());
        let n = c.normalized();
        assert_eq!(n.items(), &[B, w("x"), B]);
        assert!(n.is_normalized());
    }

    #[test]
    fn split_bookkeeping() {
        for class in 0..4 {
            assert_eq!(Split::from_flag_class(class).flag_class(), Some(class));
        }
        assert_eq!(Split::LeftLen(0).new_blanks(Some(1)), 0);
        assert_eq!(Split::LeftLen(1).new_blanks(Some(3)), 2);
        assert_eq!(Split::Flags { left: true, right: false }.new_blanks(None), 1);
    }
}
