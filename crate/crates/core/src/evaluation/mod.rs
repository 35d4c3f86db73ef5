//! Likelihood estimates and task metrics.

mod likelihood;
mod metrics;

pub use likelihood::{
    corpus_ppl, corpus_ppl_exhaustive, exact_log_marginal, mc_log_marginal, mc_log_marginal_orders,
    PplEstimate,
};
pub use metrics::{bleu, cer, is_valid, substitute_unknown, validity_rate};
