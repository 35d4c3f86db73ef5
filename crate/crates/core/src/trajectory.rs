//! Generation orders and the trajectories they determine.
//!
//! Fixing the order in which sentence positions are filled fixes every
//! canvas and action along the way. The action for position `j` is read off
//! the blank span (maximal run of unplaced positions) that contains it: the
//! left flag is set iff an unplaced position of the span lies left of `j`,
//! the right flag likewise; in the length-aware variant the left length is
//! the number of unplaced span positions left of `j`.

use std::ops::Range;

use crate::canvas::{Action, Canvas, CanvasItem, Token, Variant};
use crate::error::{BlmError, Result};

/// Largest `n` for which [`enumerate_orders`] will list all `n!` orders.
pub const MAX_ENUMERATE: usize = 8;

/// A permutation of `0..n`: `order[t]` is the position filled at step `t`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Order(Vec<usize>);

impl Order {
    pub fn new(positions: Vec<usize>) -> Result<Self> {
        check_distinct(&positions, positions.len())?;
        Ok(Self(positions))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_distinct(positions: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &p in positions {
        if p >= n {
            return Err(BlmError::InvalidOrder(format!(
                "position {p} out of range for length {n}"
            )));
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(BlmError::InvalidOrder(format!("position {p} repeated")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrajectoryStep {
    pub step: usize,
    pub canvas: Canvas,
    pub action: Action,
}

/// A next-step action together with the sentence position it fills.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Target {
    pub position: usize,
    pub action: Action,
}

/// Canvas for a partial order plus every action that can come next.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub canvas: Canvas,
    /// One per unplaced position, in sentence order.
    pub targets: Vec<Target>,
    /// Sentence length.
    pub n: usize,
    /// Number of placed tokens.
    pub t: usize,
    /// Unplaced positions covered by each blank, left to right.
    pub spans: Vec<Range<usize>>,
}

/// Maximal runs of unplaced positions.
fn unplaced_spans(placed: &[bool]) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &p) in placed.iter().enumerate() {
        match (p, start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(s..placed.len());
    }
    spans
}

/// The action that places `x[j]` given the placed set. `j` must be unplaced.
fn action_for(
    x: &[Token],
    spans: &[Range<usize>],
    j: usize,
    variant: Variant,
) -> Action {
    let (blank, span) = spans
        .iter()
        .enumerate()
        .find(|(_, s)| s.contains(&j))
        .expect("position is unplaced");
    match variant {
        Variant::Plain => Action::flags(blank, x[j].clone(), j > span.start, j + 1 < span.end),
        Variant::LengthAware => Action::left_len(blank, x[j].clone(), j - span.start),
    }
}

/// The `n` steps generating `x` in the given order.
pub fn trajectory_from_order(
    x: &[Token],
    order: &Order,
    variant: Variant,
) -> Result<Vec<TrajectoryStep>> {
    let n = x.len();
    if n == 0 {
        return Err(BlmError::EmptySentence);
    }
    if order.len() != n {
        return Err(BlmError::InvalidOrder(format!(
            "order has {} positions for a sentence of length {n}",
            order.len()
        )));
    }
    let mut placed = vec![false; n];
    let mut canvas = Canvas::initial_for(variant, n);
    let mut steps = Vec::with_capacity(n);
    for (step, &j) in order.as_slice().iter().enumerate() {
        let spans = unplaced_spans(&placed);
        let action = action_for(x, &spans, j, variant);
        let next = canvas.apply(&action)?;
        steps.push(TrajectoryStep {
            step,
            canvas,
            action,
        });
        canvas = next;
        placed[j] = true;
    }
    debug_assert!(canvas.is_complete());
    Ok(steps)
}

/// Canvas keeping the tokens at `prefix`, with each run of the remaining
/// positions collapsed to one blank, plus the `n - t` next-step targets.
pub fn canvas_from_partial(
    x: &[Token],
    prefix: &[usize],
    variant: Variant,
) -> Result<TrainingInstance> {
    let n = x.len();
    if n == 0 {
        return Err(BlmError::EmptySentence);
    }
    if prefix.len() >= n {
        return Err(BlmError::NoActionsLeft {
            prefix: prefix.len(),
            len: n,
        });
    }
    check_distinct(prefix, n)?;
    let mut placed = vec![false; n];
    for &p in prefix {
        placed[p] = true;
    }
    let spans = unplaced_spans(&placed);

    let mut items = Vec::with_capacity(prefix.len() + spans.len());
    let mut i = 0;
    while i < n {
        if placed[i] {
            items.push(CanvasItem::Word(x[i].clone()));
            i += 1;
        } else {
            let span = spans.iter().find(|s| s.start == i).expect("span start");
            items.push(CanvasItem::Blank(match variant {
                Variant::Plain => None,
                Variant::LengthAware => Some(span.len()),
            }));
            i = span.end;
        }
    }

    let targets = (0..n)
        .filter(|&j| !placed[j])
        .map(|j| Target {
            position: j,
            action: action_for(x, &spans, j, variant),
        })
        .collect();

    Ok(TrainingInstance {
        canvas: Canvas::from_items(items),
        targets,
        n,
        t: prefix.len(),
        spans,
    })
}

/// All `n!` orders in lexicographic order.
pub fn enumerate_orders(n: usize) -> Result<Vec<Order>> {
    if n > MAX_ENUMERATE {
        return Err(BlmError::TooManyOrders {
            n,
            limit: MAX_ENUMERATE,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut out = vec![Order(perm.clone())];
    // Standard next-permutation walk.
    loop {
        let Some(i) = (1..perm.len()).rev().find(|&i| perm[i - 1] < perm[i]) else {
            break;
        };
        let pivot = i - 1;
        let j = (i..perm.len())
            .rev()
            .find(|&j| perm[j] > perm[pivot])
            .expect("successor exists");
        perm.swap(pivot, j);
        perm[i..].reverse();
        out.push(Order(perm.clone()));
    }
    Ok(out)
}

/// Step-by-step text log: one canvas per line, ending with the completed text.
pub fn render_trajectory(steps: &[TrajectoryStep], final_canvas: &Canvas, mode: crate::vocab::Mode) -> String {
    let mut out = String::new();
    for s in steps {
        out.push_str(&s.canvas.render(mode));
        out.push('\n');
    }
    out.push_str(&final_canvas.render(mode));
    out.push('\n');
    out
}
