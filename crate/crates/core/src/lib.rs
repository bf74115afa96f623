//! Knowledge-tracing workbench: student models, per-skill knowledge
//! estimators, and their evaluation against external posttest scores.

// `!(x > 0.0)` rejects NaN on purpose; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bkt;
pub mod dataset;
pub mod dkt;
pub mod dkvmn;
pub mod estimator;
pub mod math;
pub mod nn;
pub mod pfa;
pub mod pipeline;
pub mod report;
pub mod simulator;
pub mod stats;
