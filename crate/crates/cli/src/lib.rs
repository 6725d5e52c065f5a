//! Command-line pipeline around the `modalsig` library: configuration,
//! subcommand drivers and JSON reports.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;
pub mod report;
