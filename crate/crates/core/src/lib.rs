//! Revenue-optimal dynamic auctions for independent discrete-type buyers.
//!
//! The solver restricts attention to bank account mechanisms: each buyer carries a
//! scalar balance between periods, every period runs a single-period incentive
//! compatible auction parameterised by the balances, and the expected per-period
//! utility promised to each buyer (`xi`) is balance independent. For fixed promises
//! the optimal mechanism is found by backward induction over piecewise-linear
//! concave approximations of the continuation revenue; the promises are then
//! tuned by projected supergradient ascent.
//!
//! Module map:
//! - [`instance`]: value distributions, joint profiles, discrete information rents.
//! - [`lp`]: deterministic simplex with dual extraction.
//! - [`pwl`]: min-of-affine concave functions and sandwich fitting.
//! - [`period`]: the single-period LP and payment recovery.
//! - [`backward`]: value-function stack over all periods.
//! - [`xi`]: sensitivity gradient and promise optimisation.
//! - [`virtual_values`]: virtual values, ironing and maximizer diagnostics.
//! - [`oracle`]: full-history LP and repeated-Myerson benchmark.
//! - [`simulator`]: forward simulation and incentive checks.
//! - [`cli`]: command-line front end.

pub mod backward;
pub mod cli;
pub mod error;
pub mod instance;
pub mod lp;
pub mod oracle;
pub mod period;
pub mod pwl;
pub mod simulator;
pub mod virtual_values;
pub mod xi;

pub use error::{Error, Result};
pub use instance::{DiscreteDistribution, Instance, Profile};
