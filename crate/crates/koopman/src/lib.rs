//! Data-driven Koopman reduced-order models for predictive control.
//!
//! The crate fits finite-dimensional Koopman operator approximations from
//! snapshot data (EDMD), turns banks of them into switched or bilinear
//! surrogate predictors, and runs receding-horizon controllers against
//! built-in nonlinear plants (1D Burgers, Van der Pol, and a linear test
//! plant), with optional streaming model updates from closed-loop data.

// `!(x > 0.0)` style comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dictionary;
pub mod edmd;
pub mod error;
pub mod io;
pub mod krom;
mod linalg;
pub mod mpc;
pub mod plant;

pub use dictionary::Dictionary;
pub use edmd::{
    edmd_fit, edmd_fit_with, weight_from_fraction, FitOptions, KoopmanModel, OnlineAccumulator,
    SnapshotSet,
};
pub use error::{Error, Result};
pub use krom::{BilinearDynamics, BilinearModel, LocalizedBilinear, SwitchedBank};
pub use mpc::{
    closed_loop, solve_continuous, solve_switched, solve_switched_plant, ClosedLoopRun, MpcConfig,
    MpcSolution, Reference, Surrogate, UpdatePolicy,
};
pub use plant::{BurgersPlant, LinearTestPlant, Plant, Trajectory, VdpPlant};
