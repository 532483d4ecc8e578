//! Cost evaluation, exact discrete-adjoint gradients, and the augmented
//! Lagrangian solver for the control problem.
//!
//! The discretize-then-optimize route: the gradient returned here is the
//! exact derivative of the discrete objective (tracking cost by trapezoid
//! over time nodes, the piecewise-constant control term summed exactly, state
//! constraints collocated at time nodes), obtained from a backward sweep that
//! is the transpose of the forward step maps. The continuous-form costate of
//! [`crate::pdesolve::solve_alt_costate`] is computed separately for
//! reporting; the two agree up to discretization order.
//!
//! The solver is an augmented Lagrangian method: the inequality
//! `g_j(y(·,t_k)) ≤ 0` at every time node carries a nodal multiplier estimate
//! λ_{j,k} ≥ 0 updated by `λ ← max(0, λ + ρ·g)`. Each subproblem is minimized
//! over the control box by a projected truncated Gauss-Newton iteration:
//! search directions come from conjugate gradients on matrix-free
//! Hessian-vector products (one linearized solve plus one adjoint sweep per
//! product) restricted to the box-free variables, followed by monotone Armijo
//! backtracking along the projected path. The nodal constraints couple the
//! running time-integral of the control, which makes the subproblems too
//! ill-conditioned for plain first-order inner iterations at the tolerances
//! the condition checks need. At convergence the nodal atoms
//! `w_{j,k} = ω_k·λ_{j,k}` (ω_k the trapezoid weight) are the discrete
//! state-constraint multiplier measure.

use crate::model::{quad, Control, Field, MeasureWeights, SpaceTimeGrid, ValidatedSpec};
use crate::pdesolve::{
    backward_sweep, solve_alt_costate_disc, solve_state_disc, Discretization, SolveError,
};
use serde::Serialize;

/// Settings for [`solve_ocp`].
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Initial penalty parameter ρ₀ > 0.
    pub rho0: f64,
    /// Penalty growth factor (> 1) applied when feasibility stalls.
    pub rho_growth: f64,
    /// Penalty cap.
    pub rho_max: f64,
    pub outer_iters: usize,
    /// Gauss-Newton iterations per subproblem.
    pub inner_iters: usize,
    /// Conjugate-gradient budget per search direction.
    pub cg_iters: usize,
    /// Sup-norm tolerance on the projected-gradient step.
    pub grad_tol: f64,
    /// Tolerance on the maximal nodal constraint violation.
    pub constraint_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Backtracking factor in (0, 1).
    pub backtrack: f64,
    /// Recorded in the log; the solver itself is deterministic.
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            rho0: 10.0,
            rho_growth: 5.0,
            rho_max: 1e6,
            outer_iters: 40,
            inner_iters: 100,
            cg_iters: 150,
            // The sup-norm of the unit projected-gradient step cannot be
            // certified much below sqrt(eps)·(value scale) by a monotone
            // line search, so the default stays above that floor.
            grad_tol: 3e-8,
            constraint_tol: 1e-8,
            armijo: 1e-4,
            backtrack: 0.5,
            seed: 0,
        }
    }
}

impl SolveOptions {
    fn validate(&self) {
        assert!(self.rho0 > 0.0 && self.rho_growth > 1.0, "penalty schedule must grow");
        assert!(self.grad_tol > 0.0 && self.constraint_tol > 0.0, "tolerances must be positive");
        assert!(self.backtrack > 0.0 && self.backtrack < 1.0);
    }
}

/// A control together with its state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub u: Control,
    pub y: Field,
}

/// Multipliers extracted from a converged run: the reporting costate pair
/// `(p, p¹)` from the continuous-form backward equation and the nodal atoms
/// of the state-constraint measure. β is fixed to one (the problem class is
/// qualified, so there is no singular multiplier).
#[derive(Debug, Clone)]
pub struct MultiplierBundle {
    pub p: Field,
    pub p1: Field,
    pub mu: MeasureWeights,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    LineSearchStall,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub outer: usize,
    pub inner: usize,
    pub cost: f64,
    pub augmented: f64,
    pub max_violation: f64,
    pub proj_grad_norm: f64,
    pub rho: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceLog {
    pub status: SolveStatus,
    pub seed: u64,
    pub iterations: Vec<IterationRecord>,
}

#[derive(Debug)]
pub struct SolveOutput {
    pub trajectory: Trajectory,
    pub bundle: MultiplierBundle,
    pub log: ConvergenceLog,
}

/// Tracking + terminal + linear control cost of a trajectory.
///
/// Quadrature: trapezoid in space (exact `h·Σ` on zero-boundary data),
/// trapezoid over time nodes for the tracking term, and the exact stepwise
/// sum `Σ dt·u_i` for the piecewise-constant control term.
pub fn cost(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    u: &Control,
    y: &Field,
) -> Result<f64, SolveError> {
    let disc = Discretization::new(spec, grid);
    if !y.matches(grid) {
        return Err(SolveError::GridMismatch { what: "state field".to_owned() });
    }
    if u.m() != spec.m || u.n_t() != grid.n_t {
        return Err(SolveError::GridMismatch { what: "control".to_owned() });
    }
    Ok(cost_disc(&disc, u, y))
}

fn cost_disc(disc: &Discretization, u: &Control, y: &Field) -> f64 {
    let grid = &disc.grid;
    let h = grid.h();
    let dt = grid.dt();
    let mut tracking = 0.0;
    for k in 0..=grid.n_t {
        let yk = y.row(k);
        let ydk = disc.yd.row(k);
        let mut acc = 0.0;
        for i in 0..grid.n_x {
            let d = yk[i] - ydk[i];
            acc += d * d;
        }
        tracking += grid.time_weight(k) * h * acc;
    }
    let mut terminal = 0.0;
    let ylast = y.row(grid.n_t);
    for i in 0..grid.n_x {
        let d = ylast[i] - disc.yd_terminal[i];
        terminal += d * d;
    }
    terminal *= h;
    let mut linear = 0.0;
    for i in 0..disc.m {
        linear += disc.alpha[i] * dt * u.component(i).iter().sum::<f64>();
    }
    0.5 * tracking + 0.5 * terminal + linear
}

/// Nodal constraint values g_{j,k} (q rows of n_t + 1 entries).
fn constraint_table(disc: &Discretization, y: &Field) -> Vec<Vec<f64>> {
    (0..disc.q)
        .map(|j| (0..=disc.grid.n_t).map(|k| disc.constraint_value(j, y.row(k))).collect())
        .collect()
}

/// Measure-weighted Lagrangian `J(u, y[u]) + Σ_{j,k} w_{j,k}·g_j(y(t_k))`.
pub fn lagrangian_value(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    u: &Control,
    mu: &MeasureWeights,
) -> Result<f64, SolveError> {
    let disc = Discretization::new(spec, grid);
    let y = solve_state_disc(&disc, u)?;
    Ok(lagrangian_disc(&disc, u, &y, mu))
}

fn lagrangian_disc(disc: &Discretization, u: &Control, y: &Field, mu: &MeasureWeights) -> f64 {
    let mut val = cost_disc(disc, u, y);
    for j in 0..disc.q {
        for k in 0..=disc.grid.n_t {
            val += mu.weight(j, k) * disc.constraint_value(j, y.row(k));
        }
    }
    val
}

/// Discrete-adjoint costate for the measure-weighted Lagrangian, plus the
/// switching samples `Ψ_i(step k) = α_i + ∫ b_i y p dx` evaluated at the
/// step's end node. `dt·Ψ` is the exact gradient of the discrete Lagrangian
/// with respect to the control values.
pub fn adjoint_costate(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    u: &Control,
    mu: &MeasureWeights,
) -> Result<(Field, Control), SolveError> {
    let disc = Discretization::new(spec, grid);
    let y = solve_state_disc(&disc, u)?;
    let weights: Vec<&[f64]> = (0..disc.q).map(|j| mu.row(j)).collect();
    Ok(adjoint_disc(&disc, u, &y, &weights))
}

/// Switching samples only; see [`adjoint_costate`].
pub fn reduced_gradient(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    u: &Control,
    mu: &MeasureWeights,
) -> Result<Control, SolveError> {
    adjoint_costate(spec, grid, u, mu).map(|(_, psi)| psi)
}

fn adjoint_disc(
    disc: &Discretization,
    u: &Control,
    y: &Field,
    node_weights: &[&[f64]],
) -> (Field, Control) {
    let grid = &disc.grid;
    let h = grid.h();
    let mut sources = Field::zeros(grid);
    for k in 0..=grid.n_t {
        let wk = grid.time_weight(k);
        let yk = y.row(k);
        let ydk = disc.yd.row(k);
        let row = sources.row_mut(k);
        for i in 0..grid.n_x {
            row[i] = wk * (yk[i] - ydk[i]);
        }
        for (j, weights) in node_weights.iter().enumerate() {
            let w = weights[k];
            if w != 0.0 {
                for i in 0..grid.n_x {
                    row[i] += w * disc.c[j][i];
                }
            }
        }
    }
    // Terminal tracking enters the k = n_t equation as incoming data.
    let mut terminal = vec![0.0; grid.n_x];
    let ylast = y.row(grid.n_t);
    for i in 0..grid.n_x {
        terminal[i] = ylast[i] - disc.yd_terminal[i];
    }
    let p = backward_sweep(disc, u, y, &terminal, &sources);
    let mut psi = Control::constant(disc.m, grid.n_t, 0.0);
    for i in 0..disc.m {
        for k in 0..grid.n_t {
            let mut acc = 0.0;
            let yk1 = y.row(k + 1);
            let pk1 = p.row(k + 1);
            for x in 0..grid.n_x {
                acc += disc.b[i + 1][x] * yk1[x] * pk1[x];
            }
            *psi.value_mut(i, k) = disc.alpha[i] + h * acc;
        }
    }
    (p, psi)
}

/// Augmented Lagrangian value `J + Σ ω_k·Φ(λ, g; ρ)` with the shifted
/// quadratic penalty `Φ(λ, g) = (max(0, λ + ρg)² − λ²)/(2ρ)`.
pub fn augmented_lagrangian(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    u: &Control,
    lambda: &MeasureWeights,
    rho: f64,
) -> Result<f64, SolveError> {
    let disc = Discretization::new(spec, grid);
    let y = solve_state_disc(&disc, u)?;
    let g = constraint_table(&disc, &y);
    Ok(augmented_value(&disc, u, &y, &g, lambda, rho))
}

fn augmented_value(
    disc: &Discretization,
    u: &Control,
    y: &Field,
    g: &[Vec<f64>],
    lambda: &MeasureWeights,
    rho: f64,
) -> f64 {
    let mut val = cost_disc(disc, u, y);
    for j in 0..disc.q {
        for k in 0..=disc.grid.n_t {
            let lam = lambda.weight(j, k);
            let shifted = (lam + rho * g[j][k]).max(0.0);
            val += disc.grid.time_weight(k) * (shifted * shifted - lam * lam) / (2.0 * rho);
        }
    }
    val
}

/// |Σ_k w_{j,k}·g_j(y(t_k))| per constraint: the discrete complementary
/// slackness residual.
pub fn complementarity_residual(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    y: &Field,
    mu: &MeasureWeights,
) -> Vec<f64> {
    let disc = Discretization::new(spec, grid);
    (0..disc.q)
        .map(|j| {
            (0..=grid.n_t)
                .map(|k| mu.weight(j, k) * disc.constraint_value(j, y.row(k)))
                .sum::<f64>()
                .abs()
        })
        .collect()
}

/// Gauss-Newton Hessian-vector product of the subproblem at (u, y): the
/// tracking and terminal terms contribute their full second derivative, the
/// penalty contributes `ρ·(g'_j v)·g'_j` on the nodes where `λ + ρg > 0`, and
/// the bilinear second-order cross terms are dropped (Gauss-Newton keeps the
/// product positive semidefinite, which conjugate gradients relies on).
/// Entries outside `free` are zeroed on both sides.
fn gauss_newton_apply(
    disc: &Discretization,
    u: &Control,
    y: &Field,
    active: &[Vec<bool>],
    rho: f64,
    free: &[bool],
    v: &Control,
) -> Control {
    let grid = &disc.grid;
    let h = grid.h();
    let dt = grid.dt();
    let z = crate::pdesolve::linearized_sweep(disc, y, u, v);
    let mut sources = Field::zeros(grid);
    for k in 0..=grid.n_t {
        let wk = grid.time_weight(k);
        let zk = z.row(k);
        let row = sources.row_mut(k);
        for i in 0..grid.n_x {
            row[i] = wk * zk[i];
        }
        for (j, act) in active.iter().enumerate() {
            if act[k] {
                let gp = quad::inner_x(&disc.c[j], zk, h);
                let w = rho * wk * gp;
                for i in 0..grid.n_x {
                    row[i] += w * disc.c[j][i];
                }
            }
        }
    }
    let q = backward_sweep(disc, u, y, z.row(grid.n_t), &sources);
    let mut out = Control::constant(disc.m, grid.n_t, 0.0);
    for i in 0..disc.m {
        for k in 0..grid.n_t {
            if free[i * grid.n_t + k] {
                let mut acc = 0.0;
                let yk1 = y.row(k + 1);
                let qk1 = q.row(k + 1);
                for x in 0..grid.n_x {
                    acc += disc.b[i + 1][x] * yk1[x] * qk1[x];
                }
                *out.value_mut(i, k) = dt * h * acc;
            }
        }
    }
    out
}

/// Conjugate gradients on the free variables for `H d = −grad`, truncated at
/// a fixed relative residual or on loss of positive curvature. Returns a
/// descent direction (the steepest descent direction if CG makes no
/// progress).
fn truncated_cg(
    disc: &Discretization,
    u: &Control,
    y: &Field,
    active: &[Vec<bool>],
    rho: f64,
    free: &[bool],
    grad: &Control,
    max_iters: usize,
) -> Control {
    let n = grad.as_slice().len();
    let mut d = Control::constant(grad.m(), grad.n_t(), 0.0);
    let mut r = vec![0.0; n];
    for idx in 0..n {
        r[idx] = if free[idx] { -grad.as_slice()[idx] } else { 0.0 };
    }
    let r0_norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if r0_norm == 0.0 {
        return d;
    }
    let mut p = r.clone();
    let mut rs = r0_norm * r0_norm;
    for _ in 0..max_iters {
        let mut pc = Control::constant(grad.m(), grad.n_t(), 0.0);
        pc.as_mut_slice().copy_from_slice(&p);
        let hp = gauss_newton_apply(disc, u, y, active, rho, free, &pc);
        let php: f64 = p.iter().zip(hp.as_slice()).map(|(a, b)| a * b).sum();
        if php <= 1e-300 * rs {
            // Flat or negative curvature: stop with what we have.
            if d.as_slice().iter().all(|&x| x == 0.0) {
                d.as_mut_slice().copy_from_slice(&r);
            }
            break;
        }
        let alpha = rs / php;
        for idx in 0..n {
            d.as_mut_slice()[idx] += alpha * p[idx];
            r[idx] -= alpha * hp.as_slice()[idx];
        }
        let rs_new: f64 = r.iter().map(|x| x * x).sum();
        if rs_new.sqrt() <= 0.05 * r0_norm {
            break;
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for idx in 0..n {
            p[idx] = r[idx] + beta * p[idx];
        }
    }
    d
}

/// Solve the control problem by the augmented-Lagrangian outer loop with
/// projected-gradient inner iterations. Non-convergence is reported through
/// [`SolveStatus`] with the best iterate and full log still returned.
pub fn solve_ocp(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    opts: &SolveOptions,
) -> Result<SolveOutput, SolveError> {
    opts.validate();
    let disc = Discretization::new(spec, grid);
    let dt = grid.dt();
    let n_t = grid.n_t;

    // Midpoint initialization; nodal multiplier estimates start at zero.
    let mut u = Control::constant(disc.m, n_t, 0.0);
    for i in 0..disc.m {
        let mid = 0.5 * (disc.u_lo[i] + disc.u_hi[i]);
        for k in 0..n_t {
            *u.value_mut(i, k) = mid;
        }
    }
    let mut lambda = MeasureWeights::zeros(disc.q, n_t);
    let mut rho = opts.rho0;

    let mut log = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    let mut prev_viol = f64::INFINITY;
    let mut last_pi_norm = f64::INFINITY;

    let mut y = solve_state_disc(&disc, &u)?;
    let mut g = constraint_table(&disc, &y);

    'outer: for outer in 0..opts.outer_iters {
        let mut val = augmented_value(&disc, &u, &y, &g, &lambda, rho);
        let mut step = 0.0;

        for inner in 0..opts.inner_iters {
            // Gradient of the subproblem: adjoint with first-order updated
            // multipliers as nodal weights.
            let tilde: Vec<Vec<f64>> = (0..disc.q)
                .map(|j| {
                    (0..=n_t)
                        .map(|k| {
                            grid.time_weight(k) * (lambda.weight(j, k) + rho * g[j][k]).max(0.0)
                        })
                        .collect()
                })
                .collect();
            let weight_rows: Vec<&[f64]> = tilde.iter().map(|w| w.as_slice()).collect();
            let (_, psi) = adjoint_disc(&disc, &u, &y, &weight_rows);
            let mut grad = psi;
            for v in grad.as_mut_slice() {
                *v *= dt;
            }

            // Projected-gradient step map and its sup-norm.
            let mut pi_norm = 0.0f64;
            for i in 0..disc.m {
                for k in 0..n_t {
                    let target =
                        (u.value(i, k) - grad.value(i, k)).clamp(disc.u_lo[i], disc.u_hi[i]);
                    pi_norm = pi_norm.max((target - u.value(i, k)).abs());
                }
            }
            last_pi_norm = pi_norm;
            let viol = g
                .iter()
                .flat_map(|row| row.iter())
                .fold(0.0f64, |a, &v| a.max(v));
            log.push(IterationRecord {
                outer,
                inner,
                cost: cost_disc(&disc, &u, &y),
                augmented: val,
                max_violation: viol,
                proj_grad_norm: pi_norm,
                rho,
                step,
            });
            if pi_norm <= opts.grad_tol {
                break;
            }

            // Variables pinned at a bound with an outward-pointing gradient
            // stay frozen for this direction.
            let mut free = vec![false; disc.m * n_t];
            for i in 0..disc.m {
                let span = disc.u_hi[i] - disc.u_lo[i];
                for k in 0..n_t {
                    let v = u.value(i, k);
                    let gkv = grad.value(i, k);
                    let at_lo = v <= disc.u_lo[i] + 1e-12 * span;
                    let at_hi = v >= disc.u_hi[i] - 1e-12 * span;
                    free[i * n_t + k] = !(at_lo && gkv > 0.0) && !(at_hi && gkv < 0.0);
                }
            }
            let pattern: Vec<Vec<bool>> = (0..disc.q)
                .map(|j| {
                    (0..=n_t).map(|k| lambda.weight(j, k) + rho * g[j][k] > 0.0).collect()
                })
                .collect();
            let mut dir =
                truncated_cg(&disc, &u, &y, &pattern, rho, &free, &grad, opts.cg_iters);
            let mut dir_grad: f64 =
                dir.as_slice().iter().zip(grad.as_slice()).map(|(a, b)| a * b).sum();
            if dir_grad >= 0.0 {
                // Gauss-Newton direction failed to descend; fall back to the
                // free-variable steepest descent direction.
                for idx in 0..free.len() {
                    dir.as_mut_slice()[idx] =
                        if free[idx] { -grad.as_slice()[idx] } else { 0.0 };
                }
                dir_grad = dir.as_slice().iter().zip(grad.as_slice()).map(|(a, b)| a * b).sum();
                if dir_grad >= 0.0 {
                    break;
                }
            }

            // Monotone Armijo backtracking along the projected path, starting
            // from the natural unit step.
            let mut s = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let mut trial = u.clone();
                for i in 0..disc.m {
                    for k in 0..n_t {
                        let v = trial.value(i, k) + s * dir.value(i, k);
                        *trial.value_mut(i, k) = v.clamp(disc.u_lo[i], disc.u_hi[i]);
                    }
                }
                let mut dir_deriv = 0.0;
                for idx in 0..u.as_slice().len() {
                    dir_deriv += grad.as_slice()[idx] * (trial.as_slice()[idx] - u.as_slice()[idx]);
                }
                if dir_deriv >= 0.0 {
                    s *= opts.backtrack;
                    if s < 1e-18 {
                        break;
                    }
                    continue;
                }
                let y_trial = solve_state_disc(&disc, &trial)?;
                let g_trial = constraint_table(&disc, &y_trial);
                let val_trial = augmented_value(&disc, &trial, &y_trial, &g_trial, &lambda, rho);
                if val_trial <= val + opts.armijo * dir_deriv {
                    // Accepted inner steps never increase the subproblem value.
                    assert!(
                        val_trial <= val + 1e-12 * (1.0 + val.abs()),
                        "augmented value increased: {val} -> {val_trial}"
                    );
                    u = trial;
                    y = y_trial;
                    g = g_trial;
                    val = val_trial;
                    step = s;
                    accepted = true;
                    break;
                }
                s *= opts.backtrack;
                if s < 1e-18 {
                    break;
                }
            }
            if !accepted {
                // No step passed Armijo: the subproblem value is at its
                // floating-point resolution. Far from stationarity that is a
                // genuine stall; otherwise hand back to the outer loop.
                if pi_norm > 1e3 * opts.grad_tol {
                    status = SolveStatus::LineSearchStall;
                    break 'outer;
                }
                break;
            }
        }

        // First-order multiplier update on the nodal constraint values.
        for j in 0..disc.q {
            for k in 0..=n_t {
                let lam = (lambda.weight(j, k) + rho * g[j][k]).max(0.0);
                *lambda.weight_mut(j, k) = lam;
            }
        }
        let viol = g.iter().flat_map(|row| row.iter()).fold(0.0f64, |a, &v| a.max(v));
        if viol <= opts.constraint_tol && last_pi_norm <= opts.grad_tol {
            status = SolveStatus::Converged;
            break;
        }
        if viol > 0.25 * prev_viol {
            rho = (rho * opts.rho_growth).min(opts.rho_max);
        }
        prev_viol = viol;
    }

    // Box respect with a strict margin, whatever the termination path.
    for i in 0..disc.m {
        for k in 0..n_t {
            let v = u.value(i, k);
            assert!(
                v >= disc.u_lo[i] - 1e-14 && v <= disc.u_hi[i] + 1e-14,
                "control escaped the box: u_{i}({k}) = {v}"
            );
        }
    }

    // Final multiplier measure: trapezoid weight times the nodal estimate.
    let mut mu = MeasureWeights::zeros(disc.q, n_t);
    for j in 0..disc.q {
        for k in 0..=n_t {
            *mu.weight_mut(j, k) = grid.time_weight(k) * lambda.weight(j, k);
        }
    }
    let (p1, p) = solve_alt_costate_disc(&disc, &y, &u, &mu)?;
    Ok(SolveOutput {
        trajectory: Trajectory { u, y },
        bundle: MultiplierBundle { p, p1, mu, beta: 1.0 },
        log: ConvergenceLog { status, seed: opts.seed, iterations: log },
    })
}
