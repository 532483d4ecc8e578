//! Coefficient-function descriptors.
//!
//! Problem data (`b_i`, `c_j`, `f`, `y_0`, `y_d`, …) are described by a small
//! closed family of expressions rather than arbitrary closures, so that
//! problem files round-trip exactly and analytic derivatives are available
//! where the checks need them.
//!
//! Spatial descriptors live on Ω = (0, L):
//!
//! * `Constant(a)` — the constant `a`,
//! * `SineSeries` — `Σ aₖ · √2 sin(kπx/L)`, the Dirichlet eigenbasis of −Δ
//!   (normalized on the unit interval),
//! * `Polynomial([c₁, c₂, …])` — `c₁ x + c₂ x² + …` (no constant term, so the
//!   value at x = 0 is always zero),
//! * `Tabulated` — uniform samples over [0, L] including both boundary nodes,
//!   evaluated by linear interpolation (first-order accurate).
//!
//! Temporal descriptors are either a single piece on [0, T] or a piecewise
//! list over half-open intervals `[t₀, t₁)`; pieces are constants, ordinary
//! polynomials in t, the exponential `a·eᵗ`, or tabulated samples.

use super::ModelError;

/// Spatial coefficient function on Ω = (0, L).
#[derive(Debug, Clone, PartialEq)]
pub enum SpaceFn {
    Constant(f64),
    /// Terms `(coefficient, mode)` of `Σ a·√2 sin(kπx/L)`, modes k ≥ 1 strictly increasing.
    SineSeries(Vec<(f64, u32)>),
    /// Coefficients starting at degree one: `c[0]·x + c[1]·x² + …`.
    Polynomial(Vec<f64>),
    /// Uniform samples on [0, L], both endpoints included (length ≥ 2).
    Tabulated(Vec<f64>),
}

impl SpaceFn {
    pub fn zero() -> Self {
        SpaceFn::Constant(0.0)
    }

    /// Evaluate at `x ∈ [0, L]`.
    pub fn eval(&self, x: f64, l: f64) -> Result<f64, ModelError> {
        if !(-1e-12 * l.max(1.0)..=l * (1.0 + 1e-12)).contains(&x) {
            return Err(ModelError::OutOfDomain { coord: x, hi: l });
        }
        Ok(self.eval_unchecked(x, l))
    }

    pub(crate) fn eval_unchecked(&self, x: f64, l: f64) -> f64 {
        match self {
            SpaceFn::Constant(a) => *a,
            SpaceFn::SineSeries(terms) => terms
                .iter()
                .map(|&(a, k)| a * std::f64::consts::SQRT_2 * (k as f64 * std::f64::consts::PI * x / l).sin())
                .sum(),
            SpaceFn::Polynomial(coeffs) => {
                // Horner on c₁ + c₂ x + …, then one final multiply by x.
                let inner = coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c);
                inner * x
            }
            SpaceFn::Tabulated(vals) => {
                let n = vals.len();
                let s = (x / l * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
                let i = (s.floor() as usize).min(n - 2);
                let w = s - i as f64;
                vals[i] * (1.0 - w) + vals[i + 1] * w
            }
        }
    }

    /// First spatial derivative; `None` for tabulated data.
    pub fn eval_dx(&self, x: f64, l: f64) -> Option<f64> {
        match self {
            SpaceFn::Constant(_) => Some(0.0),
            SpaceFn::SineSeries(terms) => Some(
                terms
                    .iter()
                    .map(|&(a, k)| {
                        let w = k as f64 * std::f64::consts::PI / l;
                        a * std::f64::consts::SQRT_2 * w * (w * x).cos()
                    })
                    .sum(),
            ),
            SpaceFn::Polynomial(coeffs) => Some(
                coeffs
                    .iter()
                    .enumerate()
                    .map(|(d, &c)| c * (d as f64 + 1.0) * x.powi(d as i32))
                    .sum(),
            ),
            SpaceFn::Tabulated(_) => None,
        }
    }

    /// Second spatial derivative; `None` for tabulated data.
    pub fn eval_ddx(&self, x: f64, l: f64) -> Option<f64> {
        match self {
            SpaceFn::Constant(_) => Some(0.0),
            SpaceFn::SineSeries(terms) => Some(
                terms
                    .iter()
                    .map(|&(a, k)| {
                        let w = k as f64 * std::f64::consts::PI / l;
                        -a * std::f64::consts::SQRT_2 * w * w * (w * x).sin()
                    })
                    .sum(),
            ),
            SpaceFn::Polynomial(coeffs) => Some(
                coeffs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(d, &c)| c * (d as f64 + 1.0) * d as f64 * x.powi(d as i32 - 1))
                    .sum(),
            ),
            SpaceFn::Tabulated(_) => None,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, SpaceFn::Tabulated(_))
    }

    /// Canonical text form; `parse_space` inverts it exactly.
    pub fn render(&self) -> String {
        match self {
            SpaceFn::Constant(a) => format!("{a}"),
            SpaceFn::SineSeries(terms) => render_terms(terms.iter().map(|&(a, k)| (a, format!("sin({k})")))),
            SpaceFn::Polynomial(coeffs) => format!("poly({})", join_nums(coeffs)),
            SpaceFn::Tabulated(vals) => format!("tab({})", join_nums(vals)),
        }
    }
}

/// One smooth piece of a temporal descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum TimePiece {
    Constant(f64),
    /// Ordinary coefficients: `c[0] + c[1]·t + …`.
    Polynomial(Vec<f64>),
    /// `a · eᵗ`.
    Exponential(f64),
    /// Uniform samples on [0, T], both endpoints included (length ≥ 2).
    Tabulated(Vec<f64>),
}

impl TimePiece {
    fn eval(&self, t: f64, t_final: f64) -> f64 {
        match self {
            TimePiece::Constant(a) => *a,
            TimePiece::Polynomial(coeffs) => coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c),
            TimePiece::Exponential(a) => a * t.exp(),
            TimePiece::Tabulated(vals) => {
                let n = vals.len();
                let s = (t / t_final * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
                let i = (s.floor() as usize).min(n - 2);
                let w = s - i as f64;
                vals[i] * (1.0 - w) + vals[i + 1] * w
            }
        }
    }

    fn render(&self) -> String {
        match self {
            TimePiece::Constant(a) => format!("{a}"),
            TimePiece::Polynomial(coeffs) => format!("poly({})", join_nums(coeffs)),
            TimePiece::Exponential(a) => format!("exp({a})"),
            TimePiece::Tabulated(vals) => format!("tab({})", join_nums(vals)),
        }
    }
}

/// Temporal coefficient function on [0, T].
#[derive(Debug, Clone, PartialEq)]
pub enum TimeFn {
    /// A single piece covering all of [0, T].
    Uniform(TimePiece),
    /// Pieces over `[t₀, t₁)` with strictly increasing breakpoints; the last
    /// interval is treated as closed so t = T evaluates on it.
    Piecewise(Vec<(f64, f64, TimePiece)>),
}

impl TimeFn {
    pub fn one() -> Self {
        TimeFn::Uniform(TimePiece::Constant(1.0))
    }

    /// Evaluate at `t ∈ [0, T]`. Piecewise lookups are right-continuous.
    pub fn eval(&self, t: f64, t_final: f64) -> Result<f64, ModelError> {
        if !(-1e-12 * t_final.max(1.0)..=t_final * (1.0 + 1e-12)).contains(&t) {
            return Err(ModelError::OutOfDomain { coord: t, hi: t_final });
        }
        Ok(self.eval_unchecked(t, t_final))
    }

    pub(crate) fn eval_unchecked(&self, t: f64, t_final: f64) -> f64 {
        match self {
            TimeFn::Uniform(p) => p.eval(t, t_final),
            TimeFn::Piecewise(pieces) => {
                let idx = pieces
                    .iter()
                    .position(|&(t0, t1, _)| t >= t0 && t < t1)
                    .unwrap_or(pieces.len() - 1);
                pieces[idx].2.eval(t, t_final)
            }
        }
    }

    /// Interval endpoints where the definition changes (used to split
    /// quadratures at kinks).
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            TimeFn::Uniform(_) => Vec::new(),
            TimeFn::Piecewise(pieces) => pieces.iter().skip(1).map(|&(t0, _, _)| t0).collect(),
        }
    }

    pub fn render(&self) -> String {
        match self {
            TimeFn::Uniform(p) => p.render(),
            TimeFn::Piecewise(pieces) => {
                let body: Vec<String> = pieces
                    .iter()
                    .enumerate()
                    .map(|(i, (t0, t1, p))| {
                        let close = if i + 1 == pieces.len() { ']' } else { ')' };
                        format!("[{t0},{t1}{close}: {}", p.render())
                    })
                    .collect();
                format!("piecewise{{{}}}", body.join("; "))
            }
        }
    }
}

/// Separable space-time coefficient `space(x) · time(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeFn {
    pub space: SpaceFn,
    pub time: TimeFn,
}

impl SpaceTimeFn {
    pub fn zero() -> Self {
        SpaceTimeFn { space: SpaceFn::zero(), time: TimeFn::one() }
    }

    pub fn of_space(space: SpaceFn) -> Self {
        SpaceTimeFn { space, time: TimeFn::one() }
    }

    pub fn eval(&self, x: f64, t: f64, l: f64, t_final: f64) -> Result<f64, ModelError> {
        Ok(self.space.eval(x, l)? * self.time.eval(t, t_final)?)
    }
}

fn join_nums(vals: &[f64]) -> String {
    vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

/// Render `Σ aᵢ·atomᵢ` with signs folded into the separators.
fn render_terms(terms: impl Iterator<Item = (f64, String)>) -> String {
    let mut out = String::new();
    for (i, (a, atom)) in terms.enumerate() {
        if i == 0 {
            if a < 0.0 {
                out.push_str("-");
            }
        } else {
            out.push_str(if a < 0.0 { " - " } else { " + " });
        }
        let mag = a.abs();
        if mag == 1.0 {
            out.push_str(&atom);
        } else {
            out.push_str(&format!("{mag}*{atom}"));
        }
    }
    if out.is_empty() {
        out.push('0');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_series_normalization() {
        // c₁ = √2 sin(πx) on (0,1): value √2 at the midpoint, 0 at the boundary.
        let c1 = SpaceFn::SineSeries(vec![(1.0, 1)]);
        assert!((c1.eval(0.5, 1.0).unwrap() - std::f64::consts::SQRT_2).abs() < 1e-15);
        assert_eq!(c1.eval(0.0, 1.0).unwrap(), 0.0);
        assert!(c1.eval(1.0, 1.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn polynomial_starts_at_degree_one() {
        // poly(1,-1) = x(1-x); scaled by 2 gives 0.5 at x = 0.5.
        let p = SpaceFn::Polynomial(vec![2.0, -2.0]);
        assert!((p.eval(0.5, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(p.eval(0.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn polynomial_derivatives() {
        // p = x + 3x²: p' = 1 + 6x, p'' = 6.
        let p = SpaceFn::Polynomial(vec![1.0, 3.0]);
        assert!((p.eval_dx(0.25, 1.0).unwrap() - 2.5).abs() < 1e-15);
        assert!((p.eval_ddx(0.25, 1.0).unwrap() - 6.0).abs() < 1e-15);
    }

    #[test]
    fn sine_laplacian_is_eigenvalue() {
        let c1 = SpaceFn::SineSeries(vec![(1.0, 1)]);
        let x = 0.3;
        let lap = c1.eval_ddx(x, 1.0).unwrap();
        let val = c1.eval(x, 1.0).unwrap();
        assert!((lap + std::f64::consts::PI.powi(2) * val).abs() < 1e-12);
    }

    #[test]
    fn piecewise_time_lookup_right_continuous() {
        let td = TimeFn::Piecewise(vec![
            (0.0, 1.0, TimePiece::Constant(3.0)),
            (1.0, 3.0, TimePiece::Polynomial(vec![4.0, -1.0])),
        ]);
        assert_eq!(td.eval(0.5, 3.0).unwrap(), 3.0);
        assert_eq!(td.eval(1.0, 3.0).unwrap(), 3.0); // 4 - 1
        assert_eq!(td.eval(2.0, 3.0).unwrap(), 2.0);
        assert_eq!(td.eval(3.0, 3.0).unwrap(), 1.0); // closed last interval
    }

    #[test]
    fn tabulated_linear_interpolation() {
        let f = SpaceFn::Tabulated(vec![0.0, 1.0, 0.0]);
        assert!((f.eval(0.25, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((f.eval(0.5, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_domain_rejected() {
        let c = SpaceFn::Constant(1.0);
        assert!(matches!(c.eval(1.5, 1.0), Err(ModelError::OutOfDomain { .. })));
    }
}
