//! Second-order machinery: the quadratic form of the second variation,
//! membership tests for the critical cones, constructive sampling of strict
//! critical directions, quasi-radiality screening, and the nonnegativity
//! check.
//!
//! A direction is a pair (z[v], v) of a control perturbation with its
//! linearized state. The strict critical cone zeroes the perturbation on
//! bound-active arcs and the constraint linearization `∫ c_j z dx` on active
//! constraint arcs. On such directions the second variation
//!
//! ```text
//!   Q[p](z, v) = ∫_Q (κ z² + 2p Σ v_i b_i z) dx dt + ∫_Ω z(·,T)² dx,
//!   κ = 1 − 6γ ȳ p,
//! ```
//!
//! must be nonnegative at a local minimizer. The discrete Q uses the same
//! time weights as the cost, so that for γ = 0 the expansion
//! `Δ𝓛 = τ∫Ψ·v + ½Q[p](δy, τv)` holds to roundoff with the discrete-adjoint
//! costate (checked by [`expansion_residual`]).
//!
//! Sampling strict critical directions resolves the implicit closed loop
//! causally: the linearized state is integrated forward one implicit step at
//! a time, and on every step whose end node lies in a constrained arc the
//! free control components receive the least-squares correction that zeroes
//! `∫ c_j z dx` at that node exactly. Free components are drawn uniform in
//! [−1, 1], mollified by a 3-point moving average (arc by arc, so junction
//! kinks stay sharp), zeroed on bound-active arcs, and projected onto the
//! kernel of the step matrix on constrained arcs.

use crate::foc::ArcStructure;
use crate::model::{quad, Control, Field, MeasureWeights, SpaceTimeGrid, ValidatedSpec};
use crate::optim::{adjoint_costate, lagrangian_value};
use crate::pdesolve::{solve_state, Discretization, SolveError};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SocError {
    #[error("strict-direction sampling needs controllability on arc {arc} (step {step})")]
    ControllabilityRequired { arc: usize, step: usize },
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// A control perturbation with its linearized state and membership flags.
#[derive(Debug, Clone)]
pub struct CriticalDirection {
    pub v: Control,
    pub z: Field,
    pub in_c: bool,
    pub in_cs: bool,
    pub quasi_radial: bool,
}

/// Pointwise κ = 1 − 6γȳp (identically one for γ = 0).
pub fn kappa(spec: &ValidatedSpec, ybar: &Field, p: &Field) -> Field {
    let mut out = ybar.clone();
    let gamma = spec.gamma;
    for k in 0..=ybar.n_t() {
        let row = out.row_mut(k);
        let pk = p.row(k);
        for (i, value) in row.iter_mut().enumerate() {
            *value = 1.0 - 6.0 * gamma * *value * pk[i];
        }
    }
    out
}

/// The discrete second variation. The κz² term carries the cost's trapezoid
/// time weights, the terminal term is unweighted, and the bilinear cross term
/// pairs each control step with the state and costate at the step's end node
/// (matching the gradient convention, which is what makes the γ = 0 expansion
/// exact).
pub fn quadratic_form(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    ybar: &Field,
    p: &Field,
    z: &Field,
    v: &Control,
) -> Result<f64, SolveError> {
    if !ybar.matches(grid) || !p.matches(grid) || !z.matches(grid) {
        return Err(SolveError::GridMismatch { what: "quadratic form fields".to_owned() });
    }
    if v.m() != spec.m || v.n_t() != grid.n_t {
        return Err(SolveError::GridMismatch { what: "direction".to_owned() });
    }
    let disc = Discretization::new(spec, grid);
    Ok(quadratic_form_disc(&disc, ybar, p, z, v))
}

pub(crate) fn quadratic_form_disc(
    disc: &Discretization,
    ybar: &Field,
    p: &Field,
    z: &Field,
    v: &Control,
) -> f64 {
    let grid = &disc.grid;
    let h = grid.h();
    let dt = grid.dt();
    let gamma = disc.gamma;
    let mut quad_term = 0.0;
    for k in 0..=grid.n_t {
        let zk = z.row(k);
        let yk = ybar.row(k);
        let pk = p.row(k);
        let mut acc = 0.0;
        for i in 0..grid.n_x {
            let kap = 1.0 - 6.0 * gamma * yk[i] * pk[i];
            acc += kap * zk[i] * zk[i];
        }
        quad_term += grid.time_weight(k) * h * acc;
    }
    let mut cross = 0.0;
    for k in 0..grid.n_t {
        let zk1 = z.row(k + 1);
        let pk1 = p.row(k + 1);
        for i in 0..disc.m {
            let vi = v.value(i, k);
            if vi != 0.0 {
                let mut acc = 0.0;
                for x in 0..grid.n_x {
                    acc += pk1[x] * disc.b[i + 1][x] * zk1[x];
                }
                cross += dt * vi * h * acc;
            }
        }
    }
    let zt = z.row(grid.n_t);
    let terminal = quad::inner_x(zt, zt, h);
    quad_term + 2.0 * cross + terminal
}

/// Cone-membership flags with the worst residuals behind them.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Criticality {
    pub in_c: bool,
    pub in_cs: bool,
    pub residual_c: f64,
    pub residual_cs: f64,
}

/// Test a direction against the critical cone (complementarity with the
/// switching function, sign conditions on bound-active arcs, one-sided
/// constraint linearization) and the strict cone (perturbation zero on
/// bound-active arcs, constraint linearization zero on active arcs).
pub fn is_critical(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    arcs: &ArcStructure,
    psi: &Control,
    v: &Control,
    z: &Field,
    tol: f64,
) -> Criticality {
    let disc = Discretization::new(spec, grid);
    let mut res_c = 0.0f64;
    let mut res_cs = 0.0f64;
    for k in 0..grid.n_t {
        let arc = &arcs.arcs[arcs.arc_of_step(k, grid)];
        for i in 0..spec.m {
            let vi = v.value(i, k);
            res_c = res_c.max((vi * psi.value(i, k)).abs());
            if arc.lower_active.contains(&i) {
                res_c = res_c.max(-vi); // needs v ≥ 0
                res_cs = res_cs.max(vi.abs());
            } else if arc.upper_active.contains(&i) {
                res_c = res_c.max(vi); // needs v ≤ 0
                res_cs = res_cs.max(vi.abs());
            }
        }
    }
    let h = grid.h();
    for k in 0..=grid.n_t {
        let arc = &arcs.arcs[arcs.arc_of_node(k)];
        for &j in &arc.constraint_active {
            let lin = quad::inner_x(&disc.c[j], z.row(k), h);
            res_c = res_c.max(lin); // needs ∫c_j z ≤ 0
            res_cs = res_cs.max(lin.abs());
        }
    }
    Criticality {
        in_c: res_c <= tol,
        in_cs: res_c <= tol && res_cs <= tol,
        residual_c: res_c,
        residual_cs: res_cs,
    }
}

/// Sample strict critical directions by the causal closed-loop construction;
/// the fan-out is parallel when the `parallel` feature is on, with one seeded
/// generator per direction (seed + index) either way.
pub fn sample_strict_critical(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    arcs: &ArcStructure,
    ybar: &Field,
    ubar: &Control,
    count: usize,
    seed: u64,
) -> Result<Vec<CriticalDirection>, SocError> {
    let disc = Discretization::new(spec, grid);
    collect_samples(crate::par::map_indexed(count, |idx| {
        sample_one(&disc, arcs, ybar, ubar, seed.wrapping_add(idx as u64))
    }))
}

/// Single-threaded twin of [`sample_strict_critical`], kept callable with the
/// `parallel` feature enabled so the benchmark suite can compare both paths.
pub fn sample_strict_critical_seq(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    arcs: &ArcStructure,
    ybar: &Field,
    ubar: &Control,
    count: usize,
    seed: u64,
) -> Result<Vec<CriticalDirection>, SocError> {
    let disc = Discretization::new(spec, grid);
    collect_samples(crate::par::map_indexed_seq(count, |idx| {
        sample_one(&disc, arcs, ybar, ubar, seed.wrapping_add(idx as u64))
    }))
}

fn collect_samples(
    raw: Vec<Result<CriticalDirection, SocError>>,
) -> Result<Vec<CriticalDirection>, SocError> {
    raw.into_iter().collect()
}

/// Steps whose midpoint lies in the given arc.
fn steps_of_arc(arcs: &ArcStructure, a: usize, grid: &SpaceTimeGrid) -> Vec<usize> {
    (0..grid.n_t).filter(|&k| arcs.arc_of_step(k, grid) == a).collect()
}

fn sample_one(
    disc: &Discretization,
    arcs: &ArcStructure,
    ybar: &Field,
    ubar: &Control,
    seed: u64,
) -> Result<CriticalDirection, SocError> {
    let grid = &disc.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Free draws arc by arc: uniform, mollified, zero on bound-active
    // components.
    let mut draws = Control::constant(disc.m, grid.n_t, 0.0);
    for (a, arc) in arcs.arcs.iter().enumerate() {
        let steps = steps_of_arc(arcs, a, grid);
        for i in 0..disc.m {
            let raw: Vec<f64> = steps.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            if arc.bound_active(i) {
                continue; // stays zero
            }
            for (pos, &k) in steps.iter().enumerate() {
                let lo = pos.saturating_sub(1);
                let hi = (pos + 1).min(raw.len() - 1);
                let window = &raw[lo..=hi];
                *draws.value_mut(i, k) = window.iter().sum::<f64>() / window.len() as f64;
            }
        }
    }

    // The sweep may need a clean entry into a constrained arc; when the free
    // draws upstream spoil it, retry with them zeroed before the last
    // constrained arc.
    let last_constrained =
        arcs.arcs.iter().rposition(|arc| !arc.constraint_active.is_empty());
    for attempt in 0..2 {
        let (v, z) = closed_loop_sweep(disc, arcs, ybar, ubar, &draws)?;
        let residual = strict_residual(disc, arcs, &v, &z);
        let scale = 1.0 + z.values().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if residual <= 1e-8 * scale || attempt == 1 {
            let in_cs = residual <= 1e-8 * scale;
            return Ok(CriticalDirection { v, z, in_c: in_cs, in_cs, quasi_radial: false });
        }
        if let Some(last) = last_constrained {
            let cutoff = arcs.arcs[last].start_node;
            for i in 0..disc.m {
                for k in 0..grid.n_t {
                    if k < cutoff {
                        *draws.value_mut(i, k) = 0.0;
                    }
                }
            }
        }
    }
    unreachable!()
}

/// Worst strict-cone equality residual of a sampled pair.
fn strict_residual(
    disc: &Discretization,
    arcs: &ArcStructure,
    v: &Control,
    z: &Field,
) -> f64 {
    let grid = &disc.grid;
    let h = grid.h();
    let mut worst = 0.0f64;
    for k in 0..grid.n_t {
        let arc = &arcs.arcs[arcs.arc_of_step(k, grid)];
        for i in 0..disc.m {
            if arc.bound_active(i) {
                worst = worst.max(v.value(i, k).abs());
            }
        }
    }
    for k in 0..=grid.n_t {
        let arc = &arcs.arcs[arcs.arc_of_node(k)];
        for &j in &arc.constraint_active {
            worst = worst.max(quad::inner_x(&disc.c[j], z.row(k), h).abs());
        }
    }
    worst
}

/// One forward pass of the linearized dynamics with the per-step closed-loop
/// correction on constrained arcs.
fn closed_loop_sweep(
    disc: &Discretization,
    arcs: &ArcStructure,
    ybar: &Field,
    ubar: &Control,
    draws: &Control,
) -> Result<(Control, Field), SocError> {
    let grid = &disc.grid;
    let n = grid.n_x;
    let dt = grid.dt();
    let h = grid.h();
    let nu = dt / (h * h);
    let mut v = draws.clone();
    let mut z = Field::zeros(grid);
    let mut prev = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut coeff = vec![0.0; n];
    let mut aux = vec![0.0; n];

    for k in 0..grid.n_t {
        disc.coeff_on_step(ubar, k, &mut coeff);
        let yk1 = ybar.row(k + 1);
        for i in 0..n {
            diag[i] = 1.0 + 2.0 * nu + dt * (3.0 * disc.gamma * yk1[i] * yk1[i] - coeff[i]);
        }
        // Homogeneous propagation of the current state through the step.
        let mut base = prev.clone();
        tridiag(&diag, -nu, &mut base, &mut aux);
        // Response of the step to a unit impulse in each control component.
        let mut responses: Vec<Vec<f64>> = Vec::with_capacity(disc.m);
        for i in 0..disc.m {
            let mut rhs: Vec<f64> = (0..n).map(|x| dt * disc.b[i + 1][x] * yk1[x]).collect();
            tridiag(&diag, -nu, &mut rhs, &mut aux);
            responses.push(rhs);
        }

        // Correction targets: active constraints of the arc owning the end
        // node; corrections may use any component not bound-active on the
        // arc owning the step itself (so the step entering a constrained arc
        // can still be corrected by controls free on the previous arc).
        let step_arc = &arcs.arcs[arcs.arc_of_step(k, grid)];
        let end_arc_idx = arcs.arc_of_node(k + 1);
        let targets = &arcs.arcs[end_arc_idx].constraint_active;
        if !targets.is_empty() {
            let free = step_arc.free_controls(disc.m);
            let drift_of = |v: &Control| -> DVector<f64> {
                DVector::from_fn(targets.len(), |c, _| {
                    let mut acc = quad::inner_x(&disc.c[targets[c]], &base, h);
                    for i in 0..disc.m {
                        let vi = v.value(i, k);
                        if vi != 0.0 {
                            acc += vi * quad::inner_x(&disc.c[targets[c]], &responses[i], h);
                        }
                    }
                    acc
                })
            };
            let scale = 1.0 + prev.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let needs_fix = drift_of(&v).amax() > 1e-12 * scale;
            // A clean incoming state with zero draws needs nothing (the
            // usual situation on the step entering a constrained arc from a
            // fully bound-active one); otherwise the correction machinery
            // must be available.
            if needs_fix || free.len() >= targets.len() {
                if free.len() < targets.len() {
                    return Err(SocError::ControllabilityRequired {
                        arc: end_arc_idx,
                        step: k,
                    });
                }
                // Step coupling matrix m̃_{ij} = ⟨c_j, response_i⟩.
                let mt = DMatrix::<f64>::from_fn(free.len(), targets.len(), |r, c| {
                    quad::inner_x(&disc.c[targets[c]], &responses[free[r]], h)
                });
                let svd = mt.clone().svd(false, false);
                let smax = svd.singular_values.iter().fold(0.0f64, |a, s| a.max(*s));
                let smin = svd.singular_values.iter().fold(f64::INFINITY, |a, s| a.min(*s));
                if smin <= 1e-10 * smax.max(1e-300) || !smax.is_normal() {
                    if needs_fix {
                        return Err(SocError::ControllabilityRequired {
                            arc: end_arc_idx,
                            step: k,
                        });
                    }
                    // Degenerate coupling but nothing to correct: the draws
                    // already lie in the kernel.
                } else {
                    // Kernel projection of the free draws, then the
                    // least-squares correction that zeroes ⟨c_j, z⟩ at the
                    // end node exactly.
                    let d = DVector::<f64>::from_fn(free.len(), |r, _| v.value(free[r], k));
                    let mtm = mt.transpose() * &mt;
                    let chol = mtm.cholesky().ok_or(SocError::ControllabilityRequired {
                        arc: end_arc_idx,
                        step: k,
                    })?;
                    let range_coeff = chol.solve(&(mt.transpose() * &d));
                    let projected = &d - &mt * &range_coeff;
                    for (r, &i) in free.iter().enumerate() {
                        *v.value_mut(i, k) = projected[r];
                    }
                    let correction = mt * chol.solve(&-drift_of(&v));
                    for (r, &i) in free.iter().enumerate() {
                        *v.value_mut(i, k) += correction[r];
                    }
                }
            }
        }

        // Assemble the step with the final control values.
        for (x, b) in base.iter().enumerate() {
            let mut acc = *b;
            for i in 0..disc.m {
                acc += v.value(i, k) * responses[i][x];
            }
            prev[x] = acc;
        }
        z.row_mut(k + 1).copy_from_slice(&prev);
    }
    Ok((v, z))
}

/// Thomas elimination, local to the sweep (constant symmetric off-diagonal).
fn tridiag(diag: &[f64], e: f64, rhs: &mut [f64], scratch: &mut [f64]) {
    let n = diag.len();
    let mut beta = diag[0];
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = e / beta;
        beta = diag[i] - e * scratch[i];
        rhs[i] = (rhs[i] - e * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
}

/// Numerical quasi-radiality screen: the constraint overshoot
/// `max_t (g_j + τ g'_j z)` must decay like τ² over the given τ ladder (or
/// stay below an absolute floor), and the control must stay in its box at
/// the smallest τ.
pub fn screen_quasi_radial(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    ubar: &Control,
    ybar: &Field,
    dir: &CriticalDirection,
    taus: &[f64],
) -> bool {
    let disc = Discretization::new(spec, grid);
    let h = grid.h();
    let floor = 1e-6 * spec.d.iter().fold(1.0f64, |a, d| a.max(d.abs()));
    let mut overshoots = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut worst = f64::NEG_INFINITY;
        for k in 0..=grid.n_t {
            for j in 0..spec.q {
                let g = disc.constraint_value(j, ybar.row(k));
                let lin = quad::inner_x(&disc.c[j], dir.z.row(k), h);
                worst = worst.max(g + tau * lin);
            }
        }
        overshoots.push(worst.max(0.0));
    }
    // Box feasibility at the smallest τ (the uniform interior-distance
    // hypothesis makes this attainable for strict directions).
    let tau_min = taus.iter().copied().fold(f64::INFINITY, f64::min);
    for i in 0..spec.m {
        for k in 0..grid.n_t {
            let val = ubar.value(i, k) + tau_min * dir.v.value(i, k);
            if val < spec.u_lo[i] - 1e-12 || val > spec.u_hi[i] + 1e-12 {
                return false;
            }
        }
    }
    // Fit the decay exponent on the pairs above the floor.
    let mut pairs: Vec<(f64, f64)> = taus
        .iter()
        .zip(&overshoots)
        .filter(|(_, o)| **o > floor)
        .map(|(t, o)| (t.ln(), o.ln()))
        .collect();
    if pairs.len() <= 1 {
        return true; // effectively no overshoot anywhere on the ladder
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len() as f64;
    let sx: f64 = pairs.iter().map(|p| p.0).sum();
    let sy: f64 = pairs.iter().map(|p| p.1).sum();
    let sxx: f64 = pairs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pairs.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    slope >= 2.0 - 0.2
}

/// Second-order report: Q for every direction, the minimum, and the verdict.
#[derive(Debug, Clone, Serialize)]
pub struct SocReport {
    pub limitations: String,
    /// Directions supplied / retained by the strict-cone and quasi-radiality
    /// screens.
    pub directions: usize,
    pub screened: usize,
    pub q_values: Vec<f64>,
    pub min_q: f64,
    pub min_index: Option<usize>,
    /// Scaled tolerance at the minimizing direction.
    pub tolerance: f64,
    pub pass: bool,
    pub vacuous: bool,
}

/// Evaluate the quadratic form on every screened direction (fans out in
/// parallel with the `parallel` feature) and check nonnegativity against
/// `−soc_tol·(‖v‖₂² + ‖z‖²)`.
pub fn check_second_order(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    ybar: &Field,
    p: &Field,
    directions: &[CriticalDirection],
    soc_tol: f64,
) -> SocReport {
    let disc = Discretization::new(spec, grid);
    let kept: Vec<&CriticalDirection> =
        directions.iter().filter(|d| d.in_cs && d.quasi_radial).collect();
    let q_values: Vec<f64> = crate::par::map_indexed(kept.len(), |idx| {
        quadratic_form_disc(&disc, ybar, p, &kept[idx].z, &kept[idx].v)
    });
    let dt = grid.dt();
    let h = grid.h();
    let mut min_q = f64::INFINITY;
    let mut min_index = None;
    let mut pass = true;
    let mut tolerance = 0.0;
    for (idx, (&q, dir)) in q_values.iter().zip(&kept).enumerate() {
        let v_norm2: f64 = dt * dir.v.iter().map(|x| x * x).sum::<f64>();
        let z_norm2: f64 = (0..=grid.n_t)
            .map(|k| grid.time_weight(k) * quad::inner_x(dir.z.row(k), dir.z.row(k), h))
            .sum();
        let tol = soc_tol * (v_norm2 + z_norm2);
        if q < min_q {
            min_q = q;
            min_index = Some(idx);
            tolerance = tol;
        }
        pass &= q >= -tol;
    }
    let vacuous = kept.is_empty();
    SocReport {
        limitations: "Q is evaluated with the single computed multiplier; a failure means the \
                      necessary condition is violated for it (candidate not optimal, or the \
                      multiplier is inaccurate). Sampling covers the strict cone only at the \
                      drawn directions."
            .to_owned(),
        directions: directions.len(),
        screened: kept.len(),
        q_values,
        min_q: if vacuous { 0.0 } else { min_q },
        min_index,
        tolerance,
        pass: pass || vacuous,
        vacuous,
    }
}

/// Residual of the exact expansion: with the discrete-adjoint costate and
/// measure weights w,
///
/// `|𝓛(ū + τv) − 𝓛(ū) − τ Σ dt·Ψ·v − ½Q[p](δy, τv)|`,
///
/// where δy = y[ū+τv] − y[ū]. Zero to roundoff for γ = 0; for γ > 0 the gap
/// is the cubic remainder.
pub fn expansion_residual(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    ubar: &Control,
    mu: &MeasureWeights,
    v: &Control,
    tau: f64,
) -> Result<f64, SolveError> {
    let ybar = solve_state(spec, grid, ubar)?;
    let (p, psi) = adjoint_costate(spec, grid, ubar, mu)?;
    let mut u_tau = ubar.clone();
    for (t, dv) in u_tau.as_mut_slice().iter_mut().zip(v.iter()) {
        *t += tau * dv;
    }
    let y_tau = solve_state(spec, grid, &u_tau)?;
    let mut dy = y_tau.clone();
    for (d, b) in dy.values_mut().iter_mut().zip(ybar.values()) {
        *d -= b;
    }
    let mut v_tau = v.clone();
    for t in v_tau.as_mut_slice() {
        *t *= tau;
    }
    let l0 = lagrangian_value(spec, grid, ubar, mu)?;
    let l1 = lagrangian_value(spec, grid, &u_tau, mu)?;
    let dt = grid.dt();
    let mut linear = 0.0;
    for i in 0..spec.m {
        for k in 0..grid.n_t {
            linear += dt * psi.value(i, k) * v_tau.value(i, k);
        }
    }
    let q = quadratic_form(spec, grid, &ybar, &p, &dy, &v_tau)?;
    Ok((l1 - l0 - linear - 0.5 * q).abs())
}
