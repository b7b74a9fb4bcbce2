// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod glm;
pub mod estimators;
pub mod harmonize;
pub mod bayes;
pub mod intervals;
pub mod quadrature;
pub mod sim;
pub mod pipeline;
