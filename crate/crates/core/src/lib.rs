//! Two-sided facility location.
//!
//! Buyers and sellers arrive at nodes of a metric space. The platform posts a
//! price and a wage at every node, opens facilities, and routes participating
//! demand and supply to open facilities within a distance bound. Every open
//! facility must see balanced flow of at least `L`, and total profit must be
//! non-negative. This crate builds the LP relaxations of that problem,
//! rescales and rounds their solutions into integral facility openings at
//! distance `4R`, and ships the queueing analytics and the envy-free lottery
//! pricing variant that sit alongside it.
//!
//! Module map:
//!
//! * [`instance`]: metric, demand/supply curves, instances.
//! * [`lp`]: LP assembly, the pluggable solver interface and fractional solutions.
//! * [`rounding`]: price consolidation, structural rescaling, two-phase rounding
//!   and the independent feasibility checker.
//! * [`driver`]: guess enumeration and the end-to-end solver.
//! * [`oracle`]: brute-force integer optimum for small instances.
//! * [`queueing`]: abandonment analytics and the FIFO simulator.
//! * [`envy`]: envy-free lottery pricing.
//! * [`generators`] and [`io`]: instance families and file formats.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod driver;
pub mod envy;
mod error;
pub mod generators;
pub mod instance;
pub mod io;
pub mod lp;
pub mod oracle;
pub mod queueing;
pub mod rounding;

pub use driver::{solve, RunReport, SolverConfig};
pub use error::{Error, Result};
pub use instance::{Curve, CurveRole, Distribution, Instance, Metric, Node, Objective};
pub use lp::{FractionalSolution, GuessSpec, LpBackend, LpModel, MicroLpBackend};
pub use oracle::exact_integer_opt;
pub use rounding::{IntegralSolution, RoundingTrace, VerificationReport};
