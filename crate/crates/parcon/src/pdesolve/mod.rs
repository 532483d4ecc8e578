//! Finite-difference solvers on Q = (0, L) × (0, T).
//!
//! All three equations are discretized with the second-order central stencil
//! in space and backward Euler in time (unconditionally stable; the optimal
//! controls of this problem class have kinks at junction points, which rules
//! out oscillatory second-order time schemes):
//!
//! * state: `∂t y − Δy + γy³ = f + y·Σ uᵢbᵢ`, one Newton iteration per step
//!   for the cubic (a single tridiagonal solve when γ = 0),
//! * linearized state: `∂t z + Az = Σ vᵢbᵢȳ` with
//!   `Az = −Δz + 3γȳ²z − (Σ ūᵢbᵢ)z`, the exact linearization of the discrete
//!   state step,
//! * backward costate in the absolutely continuous form
//!   `−∂t p¹ + Ap¹ = (ȳ − y_d) + Σ μⱼ·Acⱼ` with `p¹(T) = ȳ(T) − y_dT`; the
//!   multiplier measure enters only through the bounded densities μⱼ(t), and
//!   the (possibly jumping) costate is recovered algebraically as
//!   `p = p¹ − Σ cⱼμⱼ`.
//!
//! Index conventions. The control is constant on steps `(t_k, t_{k+1})`; the
//! operator attached to time node k uses the state at node k and the control
//! of the step *ending* at k. With that pairing the backward sweep is the
//! exact transpose of the forward step map, so discrete duality holds to
//! roundoff (see the unit tests).

use crate::model::{quad, Control, Field, MeasureWeights, SpaceTimeGrid, ValidatedSpec};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("Newton iteration diverged at time step {step}: residual {residual:e}")]
    NewtonDivergence { step: usize, residual: f64 },
    #[error("state solution contains non-finite values")]
    NonFiniteState,
    #[error("grid mismatch: {what}")]
    GridMismatch { what: String },
    #[error("measure weights must be nonnegative; found {value:e} for constraint {constraint} at node {node}")]
    NegativeWeight { constraint: usize, node: usize, value: f64 },
    #[error("modal reduction requires gamma = 0, got {0}")]
    GammaUnsupported(f64),
}

/// Newton settings for the implicit state step.
const NEWTON_MAX_ITERS: usize = 20;
const NEWTON_TOL: f64 = 1e-12;

/// Problem data sampled on a grid, shared by every solver pass.
pub(crate) struct Discretization {
    pub grid: SpaceTimeGrid,
    pub gamma: f64,
    pub m: usize,
    pub q: usize,
    /// b_0, …, b_m at the interior nodes.
    pub b: Vec<Vec<f64>>,
    /// c_1, …, c_q at the interior nodes.
    pub c: Vec<Vec<f64>>,
    /// −Δc_j at the interior nodes (analytic where possible, else stencil).
    pub neg_lap_c: Vec<Vec<f64>>,
    /// ∇b_i at the interior nodes, `None` for non-differentiable descriptors.
    pub b_dx: Vec<Option<Vec<f64>>>,
    pub y0: Vec<f64>,
    pub yd_terminal: Vec<f64>,
    pub f: Field,
    pub yd: Field,
    pub alpha: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub d: Vec<f64>,
    /// Nodal sup of |b_i|.
    pub b_sup: Vec<f64>,
    /// ‖y_0‖₂² and ‖f‖²_{L²(Q)} for the a-priori energy bound.
    pub y0_norm_sq: f64,
    pub f_norm_sq: f64,
}

impl Discretization {
    pub fn new(spec: &ValidatedSpec, grid: &SpaceTimeGrid) -> Self {
        let h = grid.h();
        let b: Vec<Vec<f64>> = spec.b.iter().map(|f| grid.sample_space(f)).collect();
        let c: Vec<Vec<f64>> = spec.c.iter().map(|f| grid.sample_space(f)).collect();
        let neg_lap_c = spec
            .c
            .iter()
            .zip(&c)
            .map(|(desc, samples)| {
                if desc.is_differentiable() {
                    (0..grid.n_x).map(|i| -desc.eval_ddx(grid.x(i), spec.l).unwrap()).collect()
                } else {
                    // Central stencil; the boundary samples vanish by validation.
                    let mut out = vec![0.0; grid.n_x];
                    for i in 0..grid.n_x {
                        let left = if i == 0 { 0.0 } else { samples[i - 1] };
                        let right = if i + 1 == grid.n_x { 0.0 } else { samples[i + 1] };
                        out[i] = (2.0 * samples[i] - left - right) / (h * h);
                    }
                    out
                }
            })
            .collect();
        let b_dx = spec
            .b
            .iter()
            .map(|f| {
                f.is_differentiable()
                    .then(|| (0..grid.n_x).map(|i| f.eval_dx(grid.x(i), spec.l).unwrap()).collect())
            })
            .collect();
        let f = Field::sample(grid, &spec.f);
        let yd = Field::sample(grid, &spec.yd);
        let y0 = grid.sample_space(&spec.y0);
        let yd_terminal = grid.sample_space(&spec.yd_terminal);
        let b_sup = b.iter().map(|bi| bi.iter().fold(0.0f64, |a, v| a.max(v.abs()))).collect();
        let y0_norm_sq = quad::inner_x(&y0, &y0, h);
        let f_norm_sq = (0..=grid.n_t)
            .map(|k| grid.time_weight(k) * quad::inner_x(f.row(k), f.row(k), h))
            .sum();
        Discretization {
            grid: *grid,
            gamma: spec.gamma,
            m: spec.m,
            q: spec.q,
            b,
            c,
            neg_lap_c,
            b_dx,
            y0,
            yd_terminal,
            f,
            yd,
            alpha: spec.alpha.clone(),
            u_lo: spec.u_lo.clone(),
            u_hi: spec.u_hi.clone(),
            d: spec.d.clone(),
            b_sup,
            y0_norm_sq,
            f_norm_sq,
        }
    }

    /// Bilinear coefficient `s = b_0 + Σ u_i b_i` on time step k, written into `out`.
    pub fn coeff_on_step(&self, u: &Control, k: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.b[0]);
        for i in 0..self.m {
            let ui = u.value(i, k);
            for (o, bv) in out.iter_mut().zip(&self.b[i + 1]) {
                *o += ui * bv;
            }
        }
    }

    /// Same coefficient attributed to node k (the step ending at k).
    pub fn coeff_at_node(&self, u: &Control, k: usize, out: &mut [f64]) {
        self.coeff_on_step(u, k.saturating_sub(1).min(self.grid.n_t - 1), out)
    }

    /// g_j(y(·, t_k)) = ∫ c_j y dx + d_j.
    pub fn constraint_value(&self, j: usize, row: &[f64]) -> f64 {
        quad::inner_x(&self.c[j], row, self.grid.h()) + self.d[j]
    }

    /// ∑_{i=0..m} ‖u_i‖_{L¹(0,T)} with u_0 ≡ 1.
    fn control_l1(&self, u: &Control) -> f64 {
        let dt = self.grid.dt();
        let mut total = self.grid.t_final;
        for i in 0..self.m {
            total += dt * u.component(i).iter().map(|v| v.abs()).sum::<f64>();
        }
        total
    }

    fn b_sup_all(&self) -> f64 {
        self.b_sup.iter().fold(0.0f64, |a, &v| a.max(v))
    }

    fn check_control(&self, u: &Control) -> Result<(), SolveError> {
        if u.m() != self.m || u.n_t() != self.grid.n_t {
            return Err(SolveError::GridMismatch {
                what: format!(
                    "control is {}x{}, expected {}x{}",
                    u.m(),
                    u.n_t(),
                    self.m,
                    self.grid.n_t
                ),
            });
        }
        if !u.all_finite() {
            return Err(SolveError::NonFiniteState);
        }
        Ok(())
    }

    fn check_field(&self, y: &Field, what: &str) -> Result<(), SolveError> {
        if !y.matches(&self.grid) {
            return Err(SolveError::GridMismatch { what: what.to_owned() });
        }
        Ok(())
    }
}

/// Thomas elimination for a symmetric tridiagonal system with constant
/// off-diagonal `e`; solves in place into `rhs`. No pivoting: the systems
/// assembled here are strictly diagonally dominant for the step sizes of
/// interest (1/dt larger than the bilinear coefficient).
fn solve_tridiag(diag: &[f64], e: f64, rhs: &mut [f64], scratch: &mut [f64]) {
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

pub(crate) struct StepScratch {
    diag: Vec<f64>,
    rhs: Vec<f64>,
    aux: Vec<f64>,
    coeff: Vec<f64>,
    newton: Vec<f64>,
}

impl StepScratch {
    pub fn new(n_x: usize) -> Self {
        StepScratch {
            diag: vec![0.0; n_x],
            rhs: vec![0.0; n_x],
            aux: vec![0.0; n_x],
            coeff: vec![0.0; n_x],
            newton: vec![0.0; n_x],
        }
    }
}

/// One implicit state step: solve
/// `w − y_prev + dt(−Δw + γw³ − s∘w − f_next) = 0` for w.
fn state_step(
    disc: &Discretization,
    step: usize,
    y_prev: &[f64],
    s: &[f64],
    f_next: &[f64],
    w: &mut [f64],
    sc: &mut StepScratch,
) -> Result<(), SolveError> {
    let n = y_prev.len();
    let dt = disc.grid.dt();
    let h = disc.grid.h();
    let nu = dt / (h * h);
    let gamma = disc.gamma;

    if gamma == 0.0 {
        for i in 0..n {
            sc.diag[i] = 1.0 + 2.0 * nu - dt * s[i];
            w[i] = y_prev[i] + dt * f_next[i];
        }
        solve_tridiag(&sc.diag, -nu, w, &mut sc.aux);
        return Ok(());
    }

    // Newton on the cubic step, warm-started from the previous time level.
    w.copy_from_slice(y_prev);
    for iter in 0..=NEWTON_MAX_ITERS {
        let mut res = 0.0f64;
        for i in 0..n {
            let left = if i == 0 { 0.0 } else { w[i - 1] };
            let right = if i + 1 == n { 0.0 } else { w[i + 1] };
            let lap = (2.0 * w[i] - left - right) / (h * h);
            let g = w[i] - y_prev[i]
                + dt * (lap + gamma * w[i] * w[i] * w[i] - s[i] * w[i] - f_next[i]);
            sc.newton[i] = g;
            res = res.max(g.abs());
        }
        let scale = 1.0 + w.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if res <= NEWTON_TOL * scale {
            return Ok(());
        }
        if iter == NEWTON_MAX_ITERS || !res.is_finite() {
            return Err(SolveError::NewtonDivergence { step, residual: res });
        }
        for i in 0..n {
            sc.diag[i] = 1.0 + 2.0 * nu + dt * (3.0 * gamma * w[i] * w[i] - s[i]);
            sc.rhs[i] = sc.newton[i];
        }
        solve_tridiag(&sc.diag, -nu, &mut sc.rhs, &mut sc.aux);
        for i in 0..n {
            w[i] -= sc.rhs[i];
        }
    }
    unreachable!()
}

pub(crate) fn solve_state_disc(disc: &Discretization, u: &Control) -> Result<Field, SolveError> {
    disc.check_control(u)?;
    let grid = &disc.grid;
    let mut y = Field::zeros(grid);
    y.row_mut(0).copy_from_slice(&disc.y0);
    let mut sc = StepScratch::new(grid.n_x);
    let mut prev = disc.y0.clone();
    let mut next = vec![0.0; grid.n_x];
    let mut coeff = vec![0.0; grid.n_x];
    for k in 0..grid.n_t {
        disc.coeff_on_step(u, k, &mut coeff);
        state_step(disc, k, &prev, &coeff, disc.f.row(k + 1), &mut next, &mut sc)?;
        y.row_mut(k + 1).copy_from_slice(&next);
        std::mem::swap(&mut prev, &mut next);
    }
    if !y.all_finite() {
        return Err(SolveError::NonFiniteState);
    }
    assert_energy_bound(disc, u, &y);
    Ok(y)
}

/// Discrete analogue of the a-priori energy estimate: every solved state obeys
/// `max_t ‖y(·,t)‖₂ ≤ sqrt((‖y0‖² + ‖f‖²)·exp(T + 2‖u‖₁‖b‖∞))`.
fn assert_energy_bound(disc: &Discretization, u: &Control, y: &Field) {
    let exponent = disc.grid.t_final + 2.0 * disc.control_l1(u) * disc.b_sup_all();
    let bound = ((disc.y0_norm_sq + disc.f_norm_sq) * exponent.exp()).sqrt();
    let h = disc.grid.h();
    for k in 0..=disc.grid.n_t {
        let norm = quad::norm2_x(y.row(k), h);
        assert!(
            norm <= bound * 1.05 + 1e-12,
            "energy bound violated at t = {}: {} > {}",
            disc.grid.t(k),
            norm,
            bound
        );
    }
}

/// Raw forward sweep of the linearized equation, no validation or estimates;
/// the building block for both the public solver and the Hessian-vector
/// products of the optimizer.
pub(crate) fn linearized_sweep(
    disc: &Discretization,
    ybar: &Field,
    ubar: &Control,
    v: &Control,
) -> Field {
    let grid = &disc.grid;
    let dt = grid.dt();
    let h = grid.h();
    let nu = dt / (h * h);
    let mut z = Field::zeros(grid);
    let mut sc = StepScratch::new(grid.n_x);
    let mut prev = vec![0.0; grid.n_x];
    for k in 0..grid.n_t {
        disc.coeff_on_step(ubar, k, &mut sc.coeff);
        let yk1 = ybar.row(k + 1);
        for i in 0..grid.n_x {
            sc.diag[i] =
                1.0 + 2.0 * nu + dt * (3.0 * disc.gamma * yk1[i] * yk1[i] - sc.coeff[i]);
            // Source Σ v_i b_i ȳ, evaluated with the state at the step's end node.
            let mut src = 0.0;
            for ci in 0..disc.m {
                src += v.value(ci, k) * disc.b[ci + 1][i];
            }
            sc.rhs[i] = prev[i] + dt * src * yk1[i];
        }
        solve_tridiag(&sc.diag, -nu, &mut sc.rhs, &mut sc.aux);
        z.row_mut(k + 1).copy_from_slice(&sc.rhs);
        prev.copy_from_slice(&sc.rhs);
    }
    z
}

pub(crate) fn solve_linearized_disc(
    disc: &Discretization,
    ybar: &Field,
    ubar: &Control,
    v: &Control,
) -> Result<Field, SolveError> {
    disc.check_control(ubar)?;
    disc.check_control(v)?;
    disc.check_field(ybar, "state field")?;
    let z = linearized_sweep(disc, ybar, ubar, v);
    if !z.all_finite() {
        return Err(SolveError::NonFiniteState);
    }
    assert_linearized_bound(disc, ybar, ubar, v, &z);
    Ok(z)
}

/// Discrete analogue of the linearized a-priori estimate:
/// `‖z‖_{L∞(L²)} ≤ M₁·Σ ‖b_i‖∞‖v_i‖₁` with
/// `M₁ = exp(T/2 + Σ‖ū_i‖₁‖b_i‖∞)·‖ȳ‖_{L∞(L²)}`.
fn assert_linearized_bound(
    disc: &Discretization,
    ybar: &Field,
    ubar: &Control,
    v: &Control,
    z: &Field,
) {
    let h = disc.grid.h();
    let dt = disc.grid.dt();
    let y_sup = (0..=disc.grid.n_t).map(|k| quad::norm2_x(ybar.row(k), h)).fold(0.0f64, f64::max);
    let mut exponent = 0.5 * disc.grid.t_final + disc.grid.t_final * disc.b_sup[0];
    for i in 0..disc.m {
        let l1 = dt * ubar.component(i).iter().map(|x| x.abs()).sum::<f64>();
        exponent += l1 * disc.b_sup[i + 1];
    }
    let m1 = exponent.exp() * y_sup;
    let mut rhs = 0.0;
    for i in 0..disc.m {
        let l1 = dt * v.component(i).iter().map(|x| x.abs()).sum::<f64>();
        rhs += disc.b_sup[i + 1] * l1;
    }
    let bound = m1 * rhs;
    let z_sup = (0..=disc.grid.n_t).map(|k| quad::norm2_x(z.row(k), h)).fold(0.0f64, f64::max);
    assert!(z_sup <= bound * 1.05 + 1e-12, "linearized estimate violated: {} > {}", z_sup, bound);
}

/// Backward sweep `(I + dt·A⁽ᵏ⁾)pᵏ = pᵏ⁺¹ + Sᵏ` from k = n_t down to 0, where
/// `A⁽ᵏ⁾` carries the state at node k and the control of the step ending at k,
/// the terminal data enters the k = n_t equation as `pⁿᵗ⁺¹`, and `Sᵏ` is the
/// caller-supplied (already weighted) source row. The sweep is the exact
/// transpose of the forward step maps.
pub(crate) fn backward_sweep(
    disc: &Discretization,
    ubar: &Control,
    ybar: &Field,
    terminal: &[f64],
    sources: &Field,
) -> Field {
    let grid = &disc.grid;
    let dt = grid.dt();
    let h = grid.h();
    let nu = dt / (h * h);
    let mut p = Field::zeros(grid);
    let mut sc = StepScratch::new(grid.n_x);
    let mut next = terminal.to_vec();
    for k in (0..=grid.n_t).rev() {
        disc.coeff_at_node(ubar, k, &mut sc.coeff);
        let yk = ybar.row(k);
        let src = sources.row(k);
        for i in 0..grid.n_x {
            sc.diag[i] =
                1.0 + 2.0 * nu + dt * (3.0 * disc.gamma * yk[i] * yk[i] - sc.coeff[i]);
            sc.rhs[i] = next[i] + src[i];
        }
        solve_tridiag(&sc.diag, -nu, &mut sc.rhs, &mut sc.aux);
        p.row_mut(k).copy_from_slice(&sc.rhs);
        next.copy_from_slice(&sc.rhs);
    }
    p
}

pub(crate) fn solve_alt_costate_disc(
    disc: &Discretization,
    ybar: &Field,
    ubar: &Control,
    mu: &MeasureWeights,
) -> Result<(Field, Field), SolveError> {
    disc.check_control(ubar)?;
    disc.check_field(ybar, "state field")?;
    let grid = &disc.grid;
    if mu.q() != disc.q || mu.n_t() != grid.n_t {
        return Err(SolveError::GridMismatch { what: "measure weights".to_owned() });
    }
    for j in 0..disc.q {
        for (k, &w) in mu.row(j).iter().enumerate() {
            if w < 0.0 {
                return Err(SolveError::NegativeWeight { constraint: j, node: k, value: w });
            }
        }
    }

    let dt = grid.dt();
    let mu_nodes: Vec<Vec<f64>> = (0..disc.q).map(|j| mu.mu_values(j)).collect();
    let mut coeff = vec![0.0; grid.n_x];
    let mut sources = Field::zeros(grid);
    for k in 0..=grid.n_t {
        disc.coeff_at_node(ubar, k, &mut coeff);
        let yk = ybar.row(k);
        let ydk = disc.yd.row(k);
        let row = sources.row_mut(k);
        for i in 0..grid.n_x {
            let mut s = yk[i] - ydk[i];
            for j in 0..disc.q {
                // (Ac_j)(·, t_k) = −Δc_j + 3γȳ²c_j − s·c_j, assembled nodally.
                let ac = disc.neg_lap_c[j][i]
                    + (3.0 * disc.gamma * yk[i] * yk[i] - coeff[i]) * disc.c[j][i];
                s += mu_nodes[j][k] * ac;
            }
            row[i] = dt * s;
        }
    }
    let mut terminal = vec![0.0; grid.n_x];
    for i in 0..grid.n_x {
        terminal[i] = ybar.row(grid.n_t)[i] - disc.yd_terminal[i];
    }
    let p1 = backward_sweep(disc, ubar, ybar, &terminal, &sources);

    let mut p = p1.clone();
    for k in 0..=grid.n_t {
        let row = p.row_mut(k);
        for j in 0..disc.q {
            let muv = mu_nodes[j][k];
            for i in 0..grid.n_x {
                row[i] -= disc.c[j][i] * muv;
            }
        }
    }
    Ok((p1, p))
}

/// Apply the linearized operator `A = −Δ + 3γȳ² − Σ ūᵢbᵢ` to one spatial
/// slice at time node k (central stencil; the control is taken from the step
/// ending at k, matching the implicit time stepping).
pub(crate) fn apply_a_disc(
    disc: &Discretization,
    ybar: &Field,
    ubar: &Control,
    z_slice: &[f64],
    k: usize,
) -> Vec<f64> {
    let n = z_slice.len();
    let h = disc.grid.h();
    let mut coeff = vec![0.0; n];
    disc.coeff_at_node(ubar, k, &mut coeff);
    let yk = ybar.row(k);
    let mut out = vec![0.0; n];
    for i in 0..n {
        let left = if i == 0 { 0.0 } else { z_slice[i - 1] };
        let right = if i + 1 == n { 0.0 } else { z_slice[i + 1] };
        out[i] = (2.0 * z_slice[i] - left - right) / (h * h)
            + (3.0 * disc.gamma * yk[i] * yk[i] - coeff[i]) * z_slice[i];
    }
    out
}

/// Solve the state equation for a piecewise-constant control.
pub fn solve_state(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    u: &Control,
) -> Result<Field, SolveError> {
    solve_state_disc(&Discretization::new(spec, grid), u)
}

/// Solve the linearized state equation around `(ū, ȳ)` in direction v.
pub fn solve_linearized(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    ybar: &Field,
    ubar: &Control,
    v: &Control,
) -> Result<Field, SolveError> {
    solve_linearized_disc(&Discretization::new(spec, grid), ybar, ubar, v)
}

/// Solve the backward costate equation in alternative form and recover the
/// costate. Returns `(p¹, p)` with `p = p¹ − Σ cⱼμⱼ`.
pub fn solve_alt_costate(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    ybar: &Field,
    ubar: &Control,
    mu: &MeasureWeights,
) -> Result<(Field, Field), SolveError> {
    solve_alt_costate_disc(&Discretization::new(spec, grid), ybar, ubar, mu)
}

/// Apply the linearized operator to a spatial slice at time node k.
pub fn apply_a(
    spec: &ValidatedSpec,
    grid: &SpaceTimeGrid,
    ybar: &Field,
    ubar: &Control,
    z_slice: &[f64],
    k: usize,
) -> Vec<f64> {
    apply_a_disc(&Discretization::new(spec, grid), ybar, ubar, z_slice, k)
}
