//! Benchmark compilation and dataset files.
//!
//! Infilling masks a ratio of a document's tokens and collapses each maximal
//! masked run into one blank. Restoration cuts length-annotated slots out of
//! a character sequence, keeping at least one character between slots.

use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::canvas::{parse_template, Canvas, CanvasItem, Token};
use crate::error::{BlmError, Result};
use crate::model::write_atomic;
use crate::vocab::{Mode, Vocabulary};

/// Blanks a masked position set; runs become one blank, annotated with the
/// run length when `annotate` is set.
pub fn canvas_from_mask(doc: &[Token], mask: &[bool], annotate: bool) -> Result<Canvas> {
    if mask.len() != doc.len() {
        return Err(BlmError::InvalidMask(format!(
            "mask covers {} positions, document has {}",
            mask.len(),
            doc.len()
        )));
    }
    let mut items = Vec::new();
    let mut run = 0usize;
    let flush = |items: &mut Vec<CanvasItem>, run: &mut usize| {
        if *run > 0 {
            items.push(CanvasItem::Blank(annotate.then_some(*run)));
            *run = 0;
        }
    };
    for (t, &m) in doc.iter().zip(mask) {
        if m {
            run += 1;
        } else {
            flush(&mut items, &mut run);
            items.push(CanvasItem::Word(t.clone()));
        }
    }
    flush(&mut items, &mut run);
    Ok(Canvas::from_items(items))
}

/// Number of masked tokens for ratio `r`: `r * n` rounded half up.
pub fn masked_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

/// An infilling instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Infilling {
    pub canvas: Canvas,
    pub mask: Vec<bool>,
    /// The masked runs, left to right, as the reference fills of each blank.
    pub spans: Vec<Vec<Token>>,
}

/// Masks `round(ratio * n)` positions uniformly without replacement.
///
/// Blanks carry run lengths when `annotate` is set. A count of 0 leaves
/// the document unmasked with a warning; masking every token is rejected.
pub fn compile_infilling<R: Rng + ?Sized>(
    doc: &[Token],
    ratio: f64,
    annotate: bool,
    rng: &mut R,
) -> Result<Infilling> {
    if doc.is_empty() {
        return Err(BlmError::EmptySentence);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(BlmError::Config(format!("mask ratio {ratio} not in (0, 1)")));
    }
    let n = doc.len();
    let k = masked_count(ratio, n);
    if k == n {
        return Err(BlmError::InvalidMask(format!(
            "ratio {ratio} would mask all {n} tokens"
        )));
    }
    if k == 0 {
        log::warn!("ratio {ratio} masks no token of a {n}-token document");
    }
    let mut mask = vec![false; n];
    for i in index::sample(rng, n, k) {
        mask[i] = true;
    }
    let canvas = canvas_from_mask(doc, &mask, annotate)?;
    Ok(Infilling {
        canvas,
        spans: masked_spans(doc, &mask),
        mask,
    })
}

fn masked_spans(doc: &[Token], mask: &[bool]) -> Vec<Vec<Token>> {
    let mut spans: Vec<Vec<Token>> = Vec::new();
    for (i, (t, &m)) in doc.iter().zip(mask).enumerate() {
        if m {
            if i == 0 || !mask[i - 1] {
                spans.push(Vec::new());
            }
            spans.last_mut().expect("span opened").push(t.clone());
        }
    }
    spans
}

/// Replaces each blank of `canvas` with the matching fill, left to right.
pub fn fill_blanks(canvas: &Canvas, fills: &[Vec<Token>]) -> Result<Vec<Token>> {
    if fills.len() != canvas.blank_count() {
        return Err(BlmError::LengthMismatch {
            left: canvas.blank_count(),
            right: fills.len(),
        });
    }
    let mut fills = fills.iter();
    let mut out = Vec::new();
    for item in canvas.items() {
        match item {
            CanvasItem::Word(t) => out.push(t.clone()),
            CanvasItem::Blank(_) => out.extend(fills.next().expect("counted").iter().cloned()),
        }
    }
    Ok(out)
}

/// A restoration instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Restoration {
    pub canvas: Canvas,
    /// Character ranges of the slots in the source document.
    pub slots: Vec<Range<usize>>,
}

impl Restoration {
    /// Ground-truth characters of each slot.
    pub fn references(&self, doc: &[Token]) -> Vec<String> {
        self.slots
            .iter()
            .map(|r| doc[r.clone()].iter().map(|t| &*t.surface).collect())
            .collect()
    }
}

const LENGTH_ATTEMPTS: usize = 1000;

/// Cuts `slot_count` slots with lengths uniform in `lengths` out of `doc`,
/// separated by at least one kept character.
pub fn compile_restoration<R: Rng + ?Sized>(
    doc: &[Token],
    slot_count: usize,
    lengths: std::ops::RangeInclusive<usize>,
    rng: &mut R,
) -> Result<Restoration> {
    let n = doc.len();
    let (lo, hi) = (*lengths.start(), *lengths.end());
    if slot_count == 0 || lo == 0 || lo > hi {
        return Err(BlmError::Config(format!(
            "need at least one slot and a non-empty length range, got {slot_count} slots of {lo}..={hi}"
        )));
    }
    let fits = |total: usize| total + slot_count - 1 <= n;
    if !fits(slot_count * lo) {
        return Err(BlmError::SlotPlacement {
            slots: slot_count,
            len: n,
        });
    }
    let lens = (0..LENGTH_ATTEMPTS)
        .map(|_| (0..slot_count).map(|_| rng.gen_range(lo..=hi)).collect::<Vec<_>>())
        .find(|l| fits(l.iter().sum()))
        .ok_or(BlmError::SlotPlacement {
            slots: slot_count,
            len: n,
        })?;
    let total: usize = lens.iter().sum();
    // Stars and bars: the extra gap before slot i is picks[i] - i.
    let free = n - total - (slot_count - 1);
    let mut picks = index::sample(rng, free + slot_count, slot_count).into_vec();
    picks.sort_unstable();
    let mut slots = Vec::with_capacity(slot_count);
    let mut before = 0;
    for (i, (&p, &len)) in picks.iter().zip(&lens).enumerate() {
        let start = p - i + before + i;
        slots.push(start..start + len);
        before += len;
    }
    let mut mask = vec![false; n];
    for s in &slots {
        mask[s.clone()].iter_mut().for_each(|m| *m = true);
    }
    Ok(Restoration {
        canvas: canvas_from_mask(doc, &mask, true)?,
        slots,
    })
}

/// Slot count that masks about `ratio` of an `n`-character document with
/// lengths drawn from `lengths`.
pub fn slots_for_ratio(n: usize, ratio: f64, lengths: std::ops::RangeInclusive<usize>) -> usize {
    let mean = (*lengths.start() + *lengths.end()) as f64 / 2.0;
    ((ratio * n as f64 / mean).round() as usize).max(1)
}

/// Splits a document into consecutive pieces of at most `max` tokens.
pub fn chunk(doc: &[Token], max: usize) -> Vec<Vec<Token>> {
    doc.chunks(max.max(1)).map(<[Token]>::to_vec).collect()
}

fn at_line(path: &Path, line: usize, e: impl std::fmt::Display) -> BlmError {
    BlmError::AtLine {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// Lines of a UTF-8 file, without line terminators.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| {
        let line = e.as_bytes()[..e.utf8_error().valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count()
            + 1;
        at_line(path, line, "invalid UTF-8")
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Documents of a corpus file, one per non-empty line.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let lines = read_lines(path)?;
    let total = lines.len();
    let docs: Vec<String> = lines.into_iter().filter(|l| !l.trim().is_empty()).collect();
    if docs.len() < total {
        log::warn!(
            "{}: skipped {} empty lines",
            path.display(),
            total - docs.len()
        );
    }
    if docs.is_empty() {
        return Err(BlmError::EmptyCorpus);
    }
    Ok(docs)
}

/// Parses a template file; errors name the offending line.
pub fn read_templates(path: &Path, vocab: &Vocabulary, strict: bool) -> Result<Vec<Canvas>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let canvas = parse_template(line, vocab, strict).map_err(|e| at_line(path, i + 1, e))?;
            if canvas.is_empty() {
                return Err(at_line(path, i + 1, "empty template"));
            }
            if vocab.mode() == Mode::Char {
                canvas
                    .check_lengths(vocab.t_max())
                    .map_err(|e| at_line(path, i + 1, e))?;
            }
            Ok(canvas)
        })
        .collect()
}

/// Writes one line per item atomically.
pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(text: &str, mode: Mode) -> (Vocabulary, Vec<Token>) {
        let v = Vocabulary::build(&[text], 1, mode, 16).unwrap();
        let d = v.tokenize(text);
        (v, d)
    }

    #[test]
    fn worked_mask_collapses_runs() {
        let (v, d) = doc("They also have ice cream which is really good .", Mode::Word);
        let mut mask = vec![false; d.len()];
        for i in [3, 4, 6, 7, 8] {
            mask[i] = true;
        }
        let c = canvas_from_mask(&d, &mask, false).unwrap();
        assert_eq!(c.render(v.mode()), "They also have __ which __ .");
        let inst = Infilling {
            spans: masked_spans(&d, &mask),
            canvas: c,
            mask,
        };
        assert_eq!(fill_blanks(&inst.canvas, &inst.spans).unwrap(), d);
    }

    #[test]
    fn masked_count_and_reconstruction() {
        let (_, d) = doc("a b c d e f g h i j", Mode::Word);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = compile_infilling(&d, 0.1, false, &mut rng).unwrap();
        assert_eq!(inst.mask.iter().filter(|&&m| m).count(), 1);
        assert_eq!(inst.canvas.blank_count(), 1);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = compile_infilling(&d, 0.45, false, &mut rng).unwrap();
            assert_eq!(inst.mask.iter().filter(|&&m| m).count(), 5);
            assert_eq!(inst.canvas.blank_count(), inst.spans.len());
            assert_eq!(fill_blanks(&inst.canvas, &inst.spans).unwrap(), d);
        }
        assert_eq!(masked_count(0.25, 10), 3);
        assert_eq!(masked_count(0.35, 10), 4);
    }

    #[test]
    fn masking_limits() {
        let (_, d) = doc("a b", Mode::Word);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(compile_infilling(&d, 0.8, false, &mut rng).is_err());
        let inst = compile_infilling(&d, 0.1, false, &mut rng).unwrap();
        assert!(inst.canvas.is_complete());
        assert!(compile_infilling(&d, 1.0, false, &mut rng).is_err());
    }

    #[test]
    fn char_runs_are_annotated() {
        let (v, d) = doc("abcdefghij", Mode::Char);
        let mut mask = vec![false; 10];
        mask[1..8].iter_mut().for_each(|m| *m = true);
        let c = canvas_from_mask(&d, &mask, true).unwrap();
        assert_eq!(c.items()[1], CanvasItem::Blank(Some(7)));
        assert_eq!(c.render(v.mode()), "a???????ij");
    }

    #[test]
    fn restoration_slots_are_separated() {
        let text: String = "abcdefghijklmnopqrstuvwxyz".repeat(4);
        let (_, d) = doc(&text, Mode::Char);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = compile_restoration(&d, 4, 1..=10, &mut rng).unwrap();
            assert_eq!(r.slots.len(), 4);
            for s in &r.slots {
                assert!((1..=10).contains(&s.len()));
            }
            for w in r.slots.windows(2) {
                assert!(w[1].start > w[0].end, "{:?}", r.slots);
            }
            assert!(r.slots.last().unwrap().end <= d.len());
            assert_eq!(r.canvas.blank_count(), 4);
            let lens: Vec<usize> = r.canvas.blank_lengths().into_iter().flatten().collect();
            assert_eq!(lens, r.slots.iter().map(|s| s.len()).collect::<Vec<_>>());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(compile_restoration(&d[..5], 3, 2..=2, &mut rng).is_err());
        let one = compile_restoration(&d, 1, 1..=10, &mut rng).unwrap();
        assert_eq!(one.canvas.blank_count(), 1);
    }

    #[test]
    fn ratio_targeted_restoration() {
        let text: String = "the quick brown fox jumps over the lazy dog ".repeat(6);
        let (_, d) = doc(&text, Mode::Char);
        let slots = slots_for_ratio(d.len(), 0.5, 1..=10);
        let mut masked = 0;
        let trials = 200;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = compile_restoration(&d, slots, 1..=10, &mut rng).unwrap();
            masked += r.slots.iter().map(|s| s.len()).sum::<usize>();
        }
        let ratio = masked as f64 / (trials as usize * d.len()) as f64;
        assert!((ratio - 0.5).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn template_files_round_trip_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::from_words(Mode::Word, 4, 1, &["a", "b"]);
        let path = dir.path().join("t.txt");
        write_lines(&path, &["a __ b", "__", "a ___ b"]).unwrap();
        let err = read_templates(&path, &v, false).unwrap_err();
        assert!(matches!(err, BlmError::AtLine { line: 3, .. }), "{err}");
        write_lines(&path, &["a __ b", "__ a"]).unwrap();
        let ts = read_templates(&path, &v, false).unwrap();
        let rendered: Vec<String> = ts.iter().map(|c| c.render(Mode::Word)).collect();
        assert_eq!(rendered, vec!["a __ b", "__ a"]);
    }
}
