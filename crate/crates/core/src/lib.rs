//! Transfer learning for contextual joint assortment and pricing under
//! multinomial-logit demand.

// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod environment;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod mnl;
pub mod policy;
pub mod pricing;

pub use error::{Result, TjapError};
