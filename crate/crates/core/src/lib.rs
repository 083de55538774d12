//! Adversarial perturbations of external forecasts against input-driven
//! LQR/MPC controllers.
//!
//! - [`lqr`]: batch finite-horizon LQR, sensitivity matrices, rollouts.
//! - [`attack`]: closed-form worst-case cost attack and the random baseline.
//! - [`qp`]: constrained controller as a dense active-set QP.
//! - [`grad`]: solution-map derivatives and gradient attacks on any target.
//! - [`data`]: ARIMA generation and demand CSV windows.
//! - [`harness`]: experiments, statistics and reports.

pub mod attack;
pub mod data;
pub mod error;
pub mod grad;
pub mod harness;
pub mod lqr;
pub mod qp;

pub use attack::{cost_attack, dominant_eigenpair, random_sphere_attack, AttackFlag, AttackResult, EigenPair};
pub use error::{Error, Result};
pub use grad::{
    finite_difference_jacobian, iterated_attack, single_step_attack, solution_jacobian,
    target_gradient, IterationSettings, SolutionJacobian, TargetFunction,
};
pub use lqr::{build_cost_form, rollout_cost, stack_dynamics, BatchForm, SystemSpec, Timeseries};
pub use qp::{compile_constraints, solve_qp, BoxBounds, ConstraintSet, QpSolution, QpStatus};
