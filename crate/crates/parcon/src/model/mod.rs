//! Problem description: coefficient descriptors, grids, fields, controls,
//! validation, and the problem-file format.

mod descriptor;
mod parse;
mod probfile;

pub use descriptor::{SpaceFn, SpaceTimeFn, TimeFn, TimePiece};
pub use parse::{parse_space, parse_space_time, parse_time};
pub use probfile::{read_problem_file, render_problem_file};

use std::ops::Deref;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error at byte {offset}: expected one of {expected:?}, found {found:?}")]
    Parse { offset: usize, expected: Vec<&'static str>, found: String },
    #[error("coordinate {coord} outside [0, {hi}]")]
    OutOfDomain { coord: f64, hi: f64 },
    #[error("control bound order violated for component {index}: lower {lo} >= upper {hi}")]
    BoundOrder { index: usize, lo: f64, hi: f64 },
    #[error("gamma must be nonnegative, got {0}")]
    NegativeGamma(f64),
    #[error("{name} must vanish on the boundary: |{name}({at})| = {value:e} exceeds {tol:e}")]
    BoundaryViolation { name: String, at: f64, value: f64, tol: f64 },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: String, expected: usize, got: usize },
    #[error("invalid domain: need L > 0 and T > 0, got L = {l}, T = {t_final}")]
    InvalidDomain { l: f64, t_final: f64 },
    #[error("piecewise time breakpoints must tile [0, {t_final}]; got [{from}, {to}]")]
    PiecewiseCover { from: f64, to: f64, t_final: f64 },
    #[error("problem file, line {line}: {msg}")]
    ProblemFile { line: usize, msg: String },
}

impl ModelError {
    pub(crate) fn shift_offset(self, by: usize) -> Self {
        match self {
            ModelError::Parse { offset, expected, found } => {
                ModelError::Parse { offset: offset + by, expected, found }
            }
            other => other,
        }
    }
}

/// Uniform discretization of Q = (0, L) × (0, T).
///
/// `n_x` interior space nodes `x_i = (i+1)·h` with `h = L/(n_x+1)` (Dirichlet
/// boundary nodes carry the value 0 and are not stored), and `n_t` time steps
/// `t_k = k·dt` with `dt = T/n_t`, nodes k = 0..=n_t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimeGrid {
    pub l: f64,
    pub t_final: f64,
    pub n_x: usize,
    pub n_t: usize,
}

impl SpaceTimeGrid {
    pub fn new(l: f64, t_final: f64, n_x: usize, n_t: usize) -> Self {
        assert!(n_x >= 3 && n_t >= 2, "grid too small: need n_x >= 3, n_t >= 2");
        SpaceTimeGrid { l, t_final, n_x, n_t }
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.l / (self.n_x + 1) as f64
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.t_final / self.n_t as f64
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.h()
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    /// Trapezoid weight of time node k (dt in the interior, dt/2 at the ends).
    #[inline]
    pub fn time_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.n_t {
            0.5 * self.dt()
        } else {
            self.dt()
        }
    }

    /// Sample a spatial descriptor at the interior nodes.
    pub fn sample_space(&self, f: &SpaceFn) -> Vec<f64> {
        (0..self.n_x).map(|i| f.eval_unchecked(self.x(i), self.l)).collect()
    }
}

/// Nodal values of a function on Q, interior space nodes only (the Dirichlet
/// boundary is identically zero), row k holding time node `t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    n_x: usize,
    n_t: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Field { n_x: grid.n_x, n_t: grid.n_t, data: vec![0.0; (grid.n_t + 1) * grid.n_x] }
    }

    pub fn from_rows(n_x: usize, n_t: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), (n_t + 1) * n_x);
        Field { n_x, n_t, data }
    }

    /// Sample `f(x, t)` at every node.
    pub fn sample(grid: &SpaceTimeGrid, f: &SpaceTimeFn) -> Self {
        let space = grid.sample_space(&f.space);
        let mut out = Field::zeros(grid);
        for k in 0..=grid.n_t {
            let s = f.time.eval_unchecked(grid.t(k), grid.t_final);
            let row = out.row_mut(k);
            for i in 0..grid.n_x {
                row[i] = space[i] * s;
            }
        }
        out
    }

    #[inline]
    pub fn n_x(&self) -> usize {
        self.n_x
    }

    #[inline]
    pub fn n_t(&self) -> usize {
        self.n_t
    }

    #[inline]
    pub fn at(&self, k: usize, i: usize) -> f64 {
        self.data[k * self.n_x + i]
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_x..(k + 1) * self.n_x]
    }

    #[inline]
    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.n_x..(k + 1) * self.n_x]
    }

    pub fn matches(&self, grid: &SpaceTimeGrid) -> bool {
        self.n_x == grid.n_x && self.n_t == grid.n_t
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Piecewise-constant control: component i holds the value on each of the
/// `n_t` time steps `(t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    m: usize,
    n_t: usize,
    data: Vec<f64>,
}

impl Control {
    pub fn constant(m: usize, n_t: usize, value: f64) -> Self {
        Control { m, n_t, data: vec![value; m * n_t] }
    }

    pub fn from_components(components: Vec<Vec<f64>>) -> Self {
        let m = components.len();
        let n_t = components.first().map_or(0, |c| c.len());
        assert!(components.iter().all(|c| c.len() == n_t));
        Control { m, n_t, data: components.into_iter().flatten().collect() }
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn n_t(&self) -> usize {
        self.n_t
    }

    #[inline]
    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.n_t + k]
    }

    #[inline]
    pub fn value_mut(&mut self, i: usize, k: usize) -> &mut f64 {
        &mut self.data[i * self.n_t + k]
    }

    /// Value attributed to time node k (the step ending at k for k ≥ 1).
    #[inline]
    pub fn at_node(&self, i: usize, k: usize) -> f64 {
        self.value(i, k.saturating_sub(1).min(self.n_t - 1))
    }

    #[inline]
    pub fn component(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_t..(i + 1) * self.n_t]
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Time-L² norm, `sqrt(Σ_i Σ_k dt·u_i(k)²)`.
    pub fn l2_norm(&self, dt: f64) -> f64 {
        (self.data.iter().map(|v| v * v).sum::<f64>() * dt).sqrt()
    }
}

/// Nonnegative nodal atoms of the state-constraint multiplier measures dμ_j:
/// entry (j, k) is the mass placed at time node `t_k`.
///
/// The associated scalar multiplier is reconstructed right-continuous with
/// μ_j(T) = 0 via `μ_j(t_k) = −Σ_{l > k} w_{j,l}`, so μ_j ≤ 0 is nondecreasing
/// and dμ_j ≥ 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureWeights {
    q: usize,
    n_t: usize,
    data: Vec<f64>,
}

impl MeasureWeights {
    pub fn zeros(q: usize, n_t: usize) -> Self {
        MeasureWeights { q, n_t, data: vec![0.0; q * (n_t + 1)] }
    }

    pub fn from_rows(q: usize, n_t: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), q * (n_t + 1));
        MeasureWeights { q, n_t, data }
    }

    #[inline]
    pub fn q(&self) -> usize {
        self.q
    }

    #[inline]
    pub fn n_t(&self) -> usize {
        self.n_t
    }

    #[inline]
    pub fn weight(&self, j: usize, k: usize) -> f64 {
        self.data[j * (self.n_t + 1) + k]
    }

    #[inline]
    pub fn weight_mut(&mut self, j: usize, k: usize) -> &mut f64 {
        &mut self.data[j * (self.n_t + 1) + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * (self.n_t + 1)..(j + 1) * (self.n_t + 1)]
    }

    pub fn min_weight(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Total mass of dμ_j.
    pub fn total_mass(&self, j: usize) -> f64 {
        self.row(j).iter().sum()
    }

    /// μ_j at node k under the right-continuous, μ(T) = 0 convention.
    pub fn mu_at_node(&self, j: usize, k: usize) -> f64 {
        -self.row(j)[k + 1..].iter().sum::<f64>()
    }

    /// All nodal values μ_j(t_0), …, μ_j(t_{n_t}).
    pub fn mu_values(&self, j: usize) -> Vec<f64> {
        let row = self.row(j);
        let mut out = vec![0.0; self.n_t + 1];
        let mut tail = 0.0;
        for k in (0..self.n_t).rev() {
            tail += row[k + 1];
            out[k] = -tail;
        }
        out
    }
}

/// Full description of one problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    /// Interval length, Ω = (0, L).
    pub l: f64,
    /// Horizon T.
    pub t_final: f64,
    /// Coefficient γ ≥ 0 of the cubic reaction term.
    pub gamma: f64,
    /// Number of control components (u_0 ≡ 1 is not counted).
    pub m: usize,
    /// Coefficients b_0, …, b_m.
    pub b: Vec<SpaceFn>,
    /// Source term f(x, t).
    pub f: SpaceTimeFn,
    /// Initial state y_0(x), vanishing on the boundary.
    pub y0: SpaceFn,
    /// Running tracking target y_d(x, t).
    pub yd: SpaceTimeFn,
    /// Terminal tracking target.
    pub yd_terminal: SpaceFn,
    /// Linear control-cost coefficients α_i.
    pub alpha: Vec<f64>,
    /// Number of state constraints.
    pub q: usize,
    /// Constraint densities c_j, vanishing on the boundary.
    pub c: Vec<SpaceFn>,
    /// Constraint offsets d_j.
    pub d: Vec<f64>,
    /// Control box bounds, componentwise lower < upper.
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    /// Grid declared with the instance (tabulated data is sampled on it).
    pub grid: SpaceTimeGrid,
}

/// A [`ProblemSpec`] whose invariants have been checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedSpec(ProblemSpec);

impl Deref for ValidatedSpec {
    type Target = ProblemSpec;

    fn deref(&self) -> &ProblemSpec {
        &self.0
    }
}

impl ValidatedSpec {
    pub fn into_inner(self) -> ProblemSpec {
        self.0
    }
}

/// Absolute tolerance for boundary-vanishing checks on analytic descriptors.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// Check every invariant and return the spec wrapped as validated.
///
/// Idempotent: validating the inner spec of a [`ValidatedSpec`] yields an
/// equal value.
pub fn validate(spec: &ProblemSpec) -> Result<ValidatedSpec, ModelError> {
    if !(spec.l > 0.0) || !(spec.t_final > 0.0) {
        return Err(ModelError::InvalidDomain { l: spec.l, t_final: spec.t_final });
    }
    if spec.gamma < 0.0 {
        return Err(ModelError::NegativeGamma(spec.gamma));
    }
    let dims: [(&str, usize, usize); 5] = [
        ("b", spec.b.len(), spec.m + 1),
        ("alpha", spec.alpha.len(), spec.m),
        ("u_lo", spec.u_lo.len(), spec.m),
        ("u_hi", spec.u_hi.len(), spec.m),
        ("c", spec.c.len(), spec.q),
    ];
    for (what, got, expected) in dims {
        if got != expected {
            return Err(ModelError::DimensionMismatch { what: what.to_owned(), expected, got });
        }
    }
    if spec.d.len() != spec.q {
        return Err(ModelError::DimensionMismatch {
            what: "d".to_owned(),
            expected: spec.q,
            got: spec.d.len(),
        });
    }
    for i in 0..spec.m {
        if spec.u_lo[i] >= spec.u_hi[i] {
            return Err(ModelError::BoundOrder { index: i, lo: spec.u_lo[i], hi: spec.u_hi[i] });
        }
    }
    for (j, c) in spec.c.iter().enumerate() {
        check_boundary_zero(c, &format!("c_{}", j + 1), spec)?;
    }
    check_boundary_zero(&spec.y0, "y_0", spec)?;
    for (name, f) in spec
        .b
        .iter()
        .enumerate()
        .map(|(i, f)| (format!("b_{i}"), f))
        .chain(spec.c.iter().enumerate().map(|(j, f)| (format!("c_{}", j + 1), f)))
        .chain([(String::from("y_0"), &spec.y0), (String::from("y_dT"), &spec.yd_terminal)])
        .chain([(String::from("f"), &spec.f.space), (String::from("y_d"), &spec.yd.space)])
    {
        check_tab_space(f, &name, spec.grid.n_x)?;
    }
    for (name, t) in [("f", &spec.f.time), ("y_d", &spec.yd.time)] {
        check_time_descriptor(t, name, spec.t_final, spec.grid.n_t)?;
    }
    Ok(ValidatedSpec(spec.clone()))
}

fn check_boundary_zero(f: &SpaceFn, name: &str, spec: &ProblemSpec) -> Result<(), ModelError> {
    let tol = if f.is_differentiable() { BOUNDARY_TOL } else { spec.grid.h() * spec.grid.h() };
    for at in [0.0, spec.l] {
        let value = f.eval_unchecked(at, spec.l);
        if value.abs() > tol {
            return Err(ModelError::BoundaryViolation { name: name.to_owned(), at, value, tol });
        }
    }
    Ok(())
}

fn check_tab_space(f: &SpaceFn, name: &str, n_x: usize) -> Result<(), ModelError> {
    if let SpaceFn::Tabulated(vals) = f {
        if vals.len() != n_x + 2 {
            return Err(ModelError::DimensionMismatch {
                what: format!("tabulated {name}"),
                expected: n_x + 2,
                got: vals.len(),
            });
        }
    }
    Ok(())
}

fn check_time_descriptor(
    t: &TimeFn,
    name: &str,
    t_final: f64,
    n_t: usize,
) -> Result<(), ModelError> {
    match t {
        TimeFn::Uniform(p) => check_tab_time(p, name, n_t),
        TimeFn::Piecewise(pieces) => {
            let from = pieces.first().map_or(0.0, |p| p.0);
            let to = pieces.last().map_or(0.0, |p| p.1);
            if from != 0.0 || (to - t_final).abs() > 1e-12 * t_final {
                return Err(ModelError::PiecewiseCover { from, to, t_final });
            }
            for (_, _, p) in pieces {
                check_tab_time(p, name, n_t)?;
            }
            Ok(())
        }
    }
}

fn check_tab_time(p: &TimePiece, name: &str, n_t: usize) -> Result<(), ModelError> {
    if let TimePiece::Tabulated(vals) = p {
        if vals.len() != n_t + 1 {
            return Err(ModelError::DimensionMismatch {
                what: format!("tabulated {name}"),
                expected: n_t + 1,
                got: vals.len(),
            });
        }
    }
    Ok(())
}

/// The built-in reference instance on Ω = (0, 1), T = 3: γ = 0, one control
/// with b_0 ≡ 0, b_1 ≡ 1, f ≡ 0, y_0 the first Dirichlet eigenmode, one state
/// constraint ∫ c_1 y dx ≤ 2, bounds u ∈ [−1, π² + 1], and the piecewise
/// tracking target that makes the optimal control bang / constrained /
/// interior on (0, log 2) / (log 2, 2) / (2, 3).
pub fn reference_instance(n_x: usize, n_t: usize) -> ValidatedSpec {
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    let log2 = std::f64::consts::LN_2;
    let c1 = SpaceFn::SineSeries(vec![(1.0, 1)]);
    let yd_time = TimeFn::Piecewise(vec![
        (0.0, log2, TimePiece::Exponential(1.5)),
        (log2, 1.0, TimePiece::Constant(3.0)),
        (1.0, 3.0, TimePiece::Polynomial(vec![4.0, -1.0])),
    ]);
    let spec = ProblemSpec {
        l: 1.0,
        t_final: 3.0,
        gamma: 0.0,
        m: 1,
        b: vec![SpaceFn::zero(), SpaceFn::Constant(1.0)],
        f: SpaceTimeFn::zero(),
        y0: c1.clone(),
        yd: SpaceTimeFn { space: c1.clone(), time: yd_time },
        yd_terminal: c1.clone(),
        alpha: vec![0.0],
        q: 1,
        c: vec![c1],
        d: vec![-2.0],
        u_lo: vec![-1.0],
        u_hi: vec![pi2 + 1.0],
        grid: SpaceTimeGrid::new(1.0, 3.0, n_x, n_t),
    };
    validate(&spec).expect("reference instance is valid")
}

pub mod quad {
    //! Discrete inner products and norms on the grid. Spatial integrals are
    //! trapezoid rules, which on zero-boundary data reduce to `h · Σ`.

    #[inline]
    pub fn inner_x(a: &[f64], b: &[f64], h: f64) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        h * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    #[inline]
    pub fn norm2_x(a: &[f64], h: f64) -> f64 {
        (h * a.iter().map(|x| x * x).sum::<f64>()).sqrt()
    }

    #[inline]
    pub fn triple_inner_x(a: &[f64], b: &[f64], c: &[f64], h: f64) -> f64 {
        h * a.iter().zip(b).zip(c).map(|((x, y), z)| x * y * z).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_instance_validates() {
        let spec = reference_instance(101, 600);
        assert_eq!(spec.m, 1);
        assert_eq!(spec.q, 1);
        assert!((spec.u_hi[0] - (std::f64::consts::PI.powi(2) + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn degenerate_box_rejected() {
        let mut spec = reference_instance(11, 10).into_inner();
        spec.u_lo[0] = 0.0;
        spec.u_hi[0] = 0.0;
        assert!(matches!(validate(&spec), Err(ModelError::BoundOrder { index: 0, .. })));
    }

    #[test]
    fn nonvanishing_constraint_density_rejected() {
        let mut spec = reference_instance(11, 10).into_inner();
        // c_1(x) = x does not vanish at x = L.
        spec.c[0] = SpaceFn::Polynomial(vec![1.0]);
        assert!(matches!(validate(&spec), Err(ModelError::BoundaryViolation { .. })));
    }

    #[test]
    fn negative_gamma_rejected() {
        let mut spec = reference_instance(11, 10).into_inner();
        spec.gamma = -1.0;
        assert!(matches!(validate(&spec), Err(ModelError::NegativeGamma(_))));
    }

    #[test]
    fn tabulated_length_must_match_grid() {
        let mut spec = reference_instance(11, 10).into_inner();
        spec.f.space = SpaceFn::Tabulated(vec![0.0; 5]);
        assert!(matches!(validate(&spec), Err(ModelError::DimensionMismatch { .. })));
    }

    #[test]
    fn validate_is_idempotent() {
        let spec = reference_instance(11, 10);
        let again = validate(&spec).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn discrete_eigenmode_norm_is_one() {
        // Trapezoid integral of c_1² over (0,1) is exactly 1 on any grid:
        // Σ sin²(kπ i/(n+1)) = (n+1)/2.
        for n_x in [7, 32, 101] {
            let grid = SpaceTimeGrid::new(1.0, 1.0, n_x, 2);
            let c1 = grid.sample_space(&SpaceFn::SineSeries(vec![(1.0, 1)]));
            let norm2 = quad::inner_x(&c1, &c1, grid.h());
            assert!((norm2 - 1.0).abs() < 1e-12, "n_x = {n_x}: {norm2}");
        }
    }

    #[test]
    fn mu_reconstruction_conventions() {
        let mut w = MeasureWeights::zeros(1, 4);
        *w.weight_mut(0, 2) = 0.25;
        *w.weight_mut(0, 3) = 0.75;
        let mu = w.mu_values(0);
        assert_eq!(mu, vec![-1.0, -1.0, -0.75, 0.0, 0.0]);
        assert_eq!(w.mu_at_node(0, 0), -1.0);
        assert_eq!(w.mu_at_node(0, 4), 0.0);
        assert_eq!(w.total_mass(0), 1.0);
    }
}
