//! Blank language model: a sequence generator that rewrites a canvas of
//! words and blanks, one blank at a time.

pub mod autodiff;
pub mod canvas;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod training;
pub mod trajectory;
pub mod vocab;

pub use canvas::{parse_template, Action, Canvas, CanvasItem, Split, Token, Variant};
pub use error::{BlmError, Result};
pub use model::{Blm, ModelConfig};
pub use trajectory::{canvas_from_partial, enumerate_orders, trajectory_from_order, Order};
pub use vocab::{Mode, Vocabulary};
