//! Solver and optimality-condition verifier for a class of state-constrained,
//! control-affine parabolic optimal control problems.
//!
//! The governing state equation is the semilinear heat equation on an interval
//! Ω = (0, L) with homogeneous Dirichlet boundary conditions,
//!
//! ```text
//!   ∂t y − Δy + γ y³ = f + y · Σ_{i=0..m} u_i(t) b_i(x),     u_0 ≡ 1,
//! ```
//!
//! controlled through the bilinear terms `u_i b_i y`, subject to box bounds on
//! the controls and to spatially-integral state constraints
//! `g_j(y(·,t)) = ∫ c_j y dx + d_j ≤ 0` for all t. The cost is quadratic
//! tracking in space-time and at the final time plus a term linear in the
//! controls.
//!
//! The crate provides:
//!
//! * [`model`] — the problem description (coefficient expressions, grids,
//!   validation, problem files),
//! * [`pdesolve`] — implicit finite-difference solvers for the state,
//!   linearized, and backward costate equations,
//! * [`spectral`] — a sine-mode Galerkin reduction used as an independent
//!   oracle, plus the closed-form bang/constrained/interior reference solution,
//! * [`optim`] — augmented-Lagrangian solution of the control problem with an
//!   exact discrete-adjoint gradient,
//! * [`foc`] — first-order condition checks: arc structure, switching-function
//!   signs, junction jumps, constraint-multiplier density,
//! * [`soc`] — second-order machinery: the quadratic form, critical-direction
//!   sampling, and the nonnegativity check,
//! * [`rundir`] — persistence of solver runs as CSV/JSON directories.
//!
//! The binary `parcon` exposes all of this behind the subcommands `solve`,
//! `check-foc`, `check-soc`, `example-b`, and `plot`.
//!
//! With the default `parallel` feature, second-order direction sampling and
//! evaluation fan out over a rayon thread pool (capped by the `PARCON_THREADS`
//! environment variable); without it the same code paths run sequentially.

pub mod foc;
pub mod model;
pub mod optim;
mod par;
pub mod pdesolve;
pub mod rundir;
pub mod soc;
pub mod spectral;

pub use model::{
    validate, Control, Field, MeasureWeights, ModelError, ProblemSpec, SpaceTimeGrid,
    ValidatedSpec,
};
pub use optim::{MultiplierBundle, SolveOptions, SolveStatus, Trajectory};
