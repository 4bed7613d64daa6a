// `!(x >= 0.0)` guards deliberately reject NaN; integrator tables keep published digits.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod dynamics;
pub mod gmm;
pub mod heuristics;
pub mod hotdogs;
pub mod integrator;
pub mod metrics;
pub mod propagation;
pub mod scenarios;
pub mod tensorlab;
