//! Long-time simulation of ergodic SDEs and SPDEs on decreasing-step grids,
//! with diagnostics for the law of the iterated logarithm of time averages.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assume;
pub mod cli;
pub mod grid;
pub mod integrate;
pub mod lilstat;
pub mod martingale;
pub mod mc;
pub mod model;
