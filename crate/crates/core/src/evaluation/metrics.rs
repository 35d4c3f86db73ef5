use std::collections::HashMap;

use crate::canvas::{Canvas, CanvasItem, BLANK_MARKER, MISSING_CHAR};
use crate::error::{BlmError, Result};
use crate::vocab::{Vocabulary, UNK_SURFACE};

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Corpus-level 4-gram BLEU in `[0, 100]` with brevity penalty. Precisions
/// for `n ≥ 2` use add-one smoothing; an empty candidate corpus scores 0.
pub fn bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(BlmError::LengthMismatch {
            left: candidates.len(),
            right: references.len(),
        });
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, k) in ngrams(c, n) {
                matches[n - 1] += k.min(rc.get(&g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if c_len >= r_len {
        0.0
    } else {
        1.0 - r_len as f64 / c_len as f64
    };
    Ok(100.0 * (bp + log_p / 4.0).exp())
}

/// Replaces tokens missing from `vocab` with the unknown symbol; returns the
/// substitution count.
pub fn substitute_unknown(tokens: &mut [String], vocab: &Vocabulary) -> usize {
    let mut count = 0;
    for t in tokens {
        if !vocab.contains(t) {
            *t = UNK_SURFACE.to_string();
            count += 1;
        }
    }
    count
}

/// Fraction of mismatched characters over aligned slots.
pub fn cer<S: AsRef<str>>(predicted: &[S], truth: &[S]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(BlmError::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    let (mut wrong, mut total) = (0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        let p: Vec<char> = p.as_ref().chars().collect();
        let t: Vec<char> = t.as_ref().chars().collect();
        if p.len() != t.len() {
            return Err(BlmError::LengthMismatch {
                left: p.len(),
                right: t.len(),
            });
        }
        wrong += p.iter().zip(&t).filter(|(a, b)| a != b).count();
        total += t.len();
    }
    Ok(if total == 0 { 0.0 } else { wrong as f64 / total as f64 })
}

/// True when `output` keeps every fixed token of `template` in order and
/// gives each blank at least one token (exactly `t` for a blank of length `t`).
/// Blank markers left in the output do not count as fills.
pub fn is_valid<S: AsRef<str>>(template: &Canvas, output: &[S]) -> bool {
    let items = template.items();
    let n = output.len();
    let missing = MISSING_CHAR.to_string();
    let filler: Vec<bool> = output
        .iter()
        .map(|t| t.as_ref() != BLANK_MARKER && t.as_ref() != missing)
        .collect();
    // fill_run[j]: filler tokens starting at j.
    let mut fill_run = vec![0usize; n + 1];
    for j in (0..n).rev() {
        fill_run[j] = if filler[j] { fill_run[j + 1] + 1 } else { 0 };
    }
    // reach[j]: the first i items can produce the first j output tokens.
    let mut reach = vec![false; n + 1];
    reach[0] = true;
    for item in items {
        let mut next = vec![false; n + 1];
        for j in 0..=n {
            if !reach[j] {
                continue;
            }
            match item {
                CanvasItem::Word(w) => {
                    if j < n && output[j].as_ref() == &*w.surface {
                        next[j + 1] = true;
                    }
                }
                CanvasItem::Blank(Some(t)) => {
                    if fill_run[j] >= *t {
                        next[j + t] = true;
                    }
                }
                CanvasItem::Blank(None) => {
                    for k in 1..=fill_run[j] {
                        next[j + k] = true;
                    }
                }
            }
        }
        reach = next;
    }
    reach[n]
}

/// Fraction of outputs that are valid fills of their templates.
pub fn validity_rate<S: AsRef<str>>(templates: &[Canvas], outputs: &[Vec<S>]) -> Result<f64> {
    if templates.len() != outputs.len() {
        return Err(BlmError::LengthMismatch {
            left: templates.len(),
            right: outputs.len(),
        });
    }
    if templates.is_empty() {
        return Ok(1.0);
    }
    let ok = templates
        .iter()
        .zip(outputs)
        .filter(|(t, o)| is_valid(t, o))
        .count();
    Ok(ok as f64 / templates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::parse_template;
    use crate::vocab::Mode;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_cases() {
        let same = bleu(&[toks("the cat sat on the mat")], &[toks("the cat sat on the mat")]).unwrap();
        assert!((same - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&[toks("")], &[toks("a b")]).unwrap(), 0.0);
        let shuffled = bleu(&[toks("mat the on sat cat the")], &[toks("the cat sat on the mat")]).unwrap();
        assert!(shuffled < same);
        assert!(bleu(&[toks("a")], &[]).is_err());
    }

    #[test]
    fn smoothed_precisions_by_hand() {
        // p1 = 3/4, then add-one: p2 = 3/4, p3 = 2/3, p4 = 1/2.
        let expected = 100.0 * (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        let got = bleu(&[toks("a b c d")], &[toks("a b c e")]).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!((got - 65.80).abs() < 0.01);
    }

    #[test]
    fn brevity_penalty_applies() {
        let short = bleu(&[toks("a b c")], &[toks("a b c d e f")]).unwrap();
        assert!((short - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn cer_cases() {
        assert_eq!(cer(&["abc", "de"], &["abc", "de"]).unwrap(), 0.0);
        assert_eq!(cer(&["xyz"], &["abc"]).unwrap(), 1.0);
        assert!((cer(&["abc", "de"], &["abd", "de"]).unwrap() - 0.2).abs() < 1e-12);
        assert!(cer(&["ab"], &["abc"]).is_err());
    }

    #[test]
    fn validity_cases() {
        let v = Vocabulary::from_words(Mode::Word, 4, 1, &["they", "have", "which", "."]);
        let t = parse_template("they have __ which __ .", &v, false).unwrap();
        assert!(is_valid(&t, &toks("they have ice cream which is good .")));
        assert!(!is_valid(&t, &toks("they have ice cream is good .")));
        assert!(!is_valid(&t, &toks("they have which is good .")));
        assert!(!is_valid(&t, &toks("they have __ which __ .")));
        let c = Vocabulary::from_words(Mode::Char, 4, 1, &["a", "b"]);
        let t = parse_template("a??b", &c, false).unwrap();
        assert!(is_valid(&t, &["a", "x", "y", "b"]));
        assert!(!is_valid(&t, &["a", "x", "b"]));
        assert!(!is_valid(&t, &["a", "?", "?", "b"]));
        let rate = validity_rate(&[t.clone(), t], &[vec!["a", "x", "y", "b"], vec!["a", "b"]]).unwrap();
        assert_eq!(rate, 0.5);
    }

    #[test]
    fn unknown_substitution() {
        let v = Vocabulary::from_words(Mode::Word, 4, 1, &["a"]);
        let mut t = vec!["a".to_string(), "zz".to_string()];
        assert_eq!(substitute_unknown(&mut t, &v), 1);
        assert_eq!(t[1], UNK_SURFACE);
    }
}
