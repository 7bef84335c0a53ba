//! Experiment runner around `lco-core`: configuration, verification suites,
//! training and dynamics runs, convergence tables, CSV and SVG output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod dynamics;
pub mod suites;
pub mod svg;
pub mod tables;
