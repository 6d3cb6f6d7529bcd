//! Probability-flow-ODE samplers for diffusion models with per-timestep
//! least-squares calibration of their step coefficients, evaluated against
//! analytic Gaussian-mixture score models.
//!
//! The crate is organized as:
//! - [`schedule`]: noise-level parameterizations, reverse-time grids, and
//!   the uniform slot refinement used as the integration oracle.
//! - [`score`]: analytic Gaussian-mixture denoisers with exact scores,
//!   conditioning, and classifier-free guidance.
//! - [`solvers`]: baseline steppers (Heun, DDIM, multistep DPM-Solver,
//!   second- and fourth-order pseudo-linear-multistep) and the trajectory
//!   runner.
//! - [`iia`]: per-step feature assembly, the fine-grained oracle,
//!   least-squares calibration, and persisted coefficient tables.

pub mod error;
pub mod iia;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod solvers;

pub use error::{Error, Result};
pub use iia::{
    calibrate, fine_oracle, iia_step, load_table, save_table, CalibrationConfig,
    CoefficientTable, TrajectoryPolicy, Variant, VariantId, ALL_VARIANTS,
};
pub use schedule::{build_grid, refine_slot, GridKind, NoiseParam, TimeGrid};
pub use score::{Condition, GaussianMixture, GmComponent, Prediction, ScoreModel};
pub use solvers::{run_sampler, DiffusionState, Predictor, SolverKind, StepRecord};
