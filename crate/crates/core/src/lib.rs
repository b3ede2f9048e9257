//! Solvers for the mollified KPZ equation, the stochastic heat equation and
//! the associated doubly backward SDE, all driven by one shared
//! discretised space-time white noise.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod fbsde;
pub mod grid;
pub mod mollifier;
pub mod noise;
pub mod quadrature;
pub mod rng;
pub mod solvers;
pub mod stats;
pub mod stochastic;

pub use error::{Error, Result};
pub use fbsde::{
    build_z, dbsde_residual, decomposition_check, feynman_kac_u, sample_bridge, solve_fbsde, BackwardCharacteristic,
    DriverPath, FbsdeConfig, FbsdeSolution, FrozenNoise, GridRoute, Route, ZFunctional,
};
pub use grid::{Boundary, Field, FieldTrajectory, SpaceGrid, TimeGrid};
pub use mollifier::{mollifier_new, BaseKernel, Mollifier};
pub use noise::{pair_with_mollifier, project_on, sample_noise, NoiseRealization, SmoothedField};
pub use solvers::{
    cross_validate, hopf_cole, kpz_solve, she_solve, InitialCondition, KpzState, SheState, SolverOptions,
};
pub use stochastic::{
    backward_integral, forward_integral, quadratic_variation, time_reverse, DiscretePath, ReversalMode,
};
