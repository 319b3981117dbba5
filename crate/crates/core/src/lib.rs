//! Differentially-private distributed Nash equilibrium seeking for networked
//! aggregative games.
//!
//! Every player keeps a decision `x_i` inside a box and a local estimate `v_i`
//! of the network-average decision. Estimates are shared with neighbours after
//! adding Laplace noise, and the coupling term of the estimate update is scaled
//! by a diminishing weakening factor so that persistent privacy noise washes
//! out while the players still reach the exact equilibrium.
//!
//! Modules:
//!
//! * [`game`]: boxes, pseudo-gradient fields, the stacked map and assumption probes.
//! * [`network`]: coupling matrices, spectra and the contraction threshold.
//! * [`schedule`]: stepsize / weakening / noise sequences and summability verdicts.
//! * [`privacy`]: Laplace sampling, sensitivity bounds and the budget ledger.
//! * [`solver`]: the iteration engines and trajectory metrics.
//! * [`cournot`]: the networked Nash-Cournot market game and analytic oracles.
//! * [`harness`]: experiment configs, Monte Carlo runs and CSV output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cournot;
pub mod csvio;
pub mod error;
pub mod game;
pub mod harness;
pub mod network;
pub mod privacy;
pub mod rng;
pub mod schedule;
pub mod solver;

pub use error::{Error, Result};
pub use game::{AggregateConvention, DecisionProfile, FeasibleBox, GameSpec, PseudoGradientField};
pub use network::{SpectralReport, WeightMatrix, WeightRule};
pub use schedule::PolySchedule;
pub use solver::{AlgorithmVariant, GradientOracle, SolverState, TrajectoryMetrics};
