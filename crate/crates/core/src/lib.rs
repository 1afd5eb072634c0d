// NaN-rejecting range checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clock;
pub mod config;
pub mod corpus;
pub mod gateway;
pub mod meter;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod sandbox;
pub mod strategy;
