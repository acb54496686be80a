//! Command-line front end for `geoflow-core`: config resolution, commands and artifacts.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod plot;
pub mod report;
