//! Sine-mode Galerkin reduction of the γ = 0 problem to a small ODE system,
//! plus the closed-form reference solution of the built-in instance.
//!
//! Expanding in the orthonormal Dirichlet eigenbasis `e_k = √(2/L) sin(kπx/L)`
//! turns the state equation into
//!
//! ```text
//!   ẏ_k + λ_k y_k = Σ_i u_i(t) (B⁽ⁱ⁾ y)_k + f_k(t),   λ_k = (kπ/L)²,
//! ```
//!
//! with coupling matrices `B⁽ⁱ⁾_{kl} = ∫ b_i e_k e_l dx`. The reduction is
//! exact (no closure) only for γ = 0: the cubic couples infinitely many modes.
//! All inner products use composite Simpson quadrature with a fixed 4096
//! panels, far below the finite-difference discretization error, so the modal
//! path is an independent oracle for the solvers.

use crate::model::{quad, Control, Field, SpaceFn, SpaceTimeGrid, TimeFn, ValidatedSpec};
use crate::pdesolve::SolveError;
use nalgebra::DMatrix;
use std::sync::OnceLock;

const SIMPSON_PANELS: usize = 4096;

/// Galerkin reduction of one problem instance onto the first N sine modes.
#[derive(Debug, Clone)]
pub struct ModalSystem {
    pub n_modes: usize,
    pub l: f64,
    pub t_final: f64,
    /// Eigenvalues λ_k = (kπ/L)², strictly increasing.
    pub lambdas: Vec<f64>,
    /// Coupling matrices B⁽⁰⁾, …, B⁽ᵐ⁾ (symmetric; `const·I` for constant bᵢ
    /// in the orthonormal basis).
    pub coupling: Vec<DMatrix<f64>>,
    /// Modal coefficients of the spatial factors of f and y_d, with their
    /// time factors kept as descriptors.
    pub f_space: Vec<f64>,
    pub f_time: TimeFn,
    pub yd_space: Vec<f64>,
    pub yd_time: TimeFn,
    pub y0: Vec<f64>,
    pub yd_terminal: Vec<f64>,
    /// Modal coefficients of the constraint densities c_j (q × N).
    pub c_coeffs: Vec<Vec<f64>>,
}

/// Composite Simpson over [0, L] with a fixed even panel count.
fn simpson<F: Fn(f64) -> f64>(f: F, l: f64, panels: usize) -> f64 {
    let n = panels;
    let h = l / n as f64;
    let mut sum = f(0.0) + f(l);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(i as f64 * h);
    }
    sum * h / 3.0
}

fn mode(k: usize, x: f64, l: f64) -> f64 {
    (2.0 / l).sqrt() * ((k + 1) as f64 * std::f64::consts::PI * x / l).sin()
}

fn project(space: &SpaceFn, n_modes: usize, l: f64) -> Vec<f64> {
    (0..n_modes)
        .map(|k| simpson(|x| space.eval_unchecked(x, l) * mode(k, x, l), l, SIMPSON_PANELS))
        .collect()
}

/// Build the modal reduction. Fails for γ > 0, which the finite-difference
/// path owns.
pub fn build_modal(spec: &ValidatedSpec, n_modes: usize) -> Result<ModalSystem, SolveError> {
    if spec.gamma != 0.0 {
        return Err(SolveError::GammaUnsupported(spec.gamma));
    }
    let l = spec.l;
    let lambdas = (1..=n_modes)
        .map(|k| (k as f64 * std::f64::consts::PI / l).powi(2))
        .collect();
    let coupling = spec
        .b
        .iter()
        .map(|bi| {
            let mut mat = DMatrix::zeros(n_modes, n_modes);
            for k in 0..n_modes {
                for lm in k..n_modes {
                    let val = simpson(
                        |x| bi.eval_unchecked(x, l) * mode(k, x, l) * mode(lm, x, l),
                        l,
                        SIMPSON_PANELS,
                    );
                    mat[(k, lm)] = val;
                    mat[(lm, k)] = val;
                }
            }
            mat
        })
        .collect();
    Ok(ModalSystem {
        n_modes,
        l,
        t_final: spec.t_final,
        lambdas,
        coupling,
        f_space: project(&spec.f.space, n_modes, l),
        f_time: spec.f.time.clone(),
        yd_space: project(&spec.yd.space, n_modes, l),
        yd_time: spec.yd.time.clone(),
        y0: project(&spec.y0, n_modes, l),
        yd_terminal: project(&spec.yd_terminal, n_modes, l),
        c_coeffs: spec.c.iter().map(|c| project(c, n_modes, l)).collect(),
    })
}

impl ModalSystem {
    fn rhs(&self, t: f64, y: &[f64], u: &Control, out: &mut [f64]) {
        let n = self.n_modes;
        // Piecewise-constant control lookup by step index.
        let step = ((t / self.t_final * u.n_t() as f64).floor() as usize).min(u.n_t() - 1);
        let ft = self.f_time.eval_unchecked(t.min(self.t_final), self.t_final);
        for k in 0..n {
            let mut acc = -self.lambdas[k] * y[k] + self.f_space[k] * ft;
            for (kk, row) in self.coupling[0].row(k).iter().enumerate() {
                acc += row * y[kk];
            }
            for i in 0..u.m() {
                let ui = u.value(i, step);
                let b = &self.coupling[i + 1];
                let mut by = 0.0;
                for kk in 0..n {
                    by += b[(k, kk)] * y[kk];
                }
                acc += ui * by;
            }
            out[k] = acc;
        }
    }

    /// Integrate the modal ODE system with classical fourth-order Runge-Kutta
    /// over `n_t` uniform steps; returns the (n_t + 1) × N trajectory of modal
    /// coefficients.
    pub fn solve_state(&self, u: &Control, n_t: usize) -> Vec<Vec<f64>> {
        let n = self.n_modes;
        let dt = self.t_final / n_t as f64;
        let mut out = Vec::with_capacity(n_t + 1);
        let mut y = self.y0.clone();
        out.push(y.clone());
        let (mut k1, mut k2, mut k3, mut k4) = (
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
        );
        let mut tmp = vec![0.0; n];
        for step in 0..n_t {
            let t = step as f64 * dt;
            // Keep stage times strictly inside the step so the control lookup
            // never crosses to the next piece.
            let eps = 1e-12 * dt;
            self.rhs(t + eps, &y, u, &mut k1);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k1[i];
            }
            self.rhs(t + 0.5 * dt, &tmp, u, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k2[i];
            }
            self.rhs(t + 0.5 * dt, &tmp, u, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + dt * k3[i];
            }
            self.rhs(t + dt - eps, &tmp, u, &mut k4);
            for i in 0..n {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            out.push(y.clone());
        }
        out
    }
}

/// Project a nodal field onto the first N discrete sine modes (the discrete
/// modes are exactly orthonormal in the trapezoid inner product).
pub fn project_field(grid: &SpaceTimeGrid, field: &Field, n_modes: usize) -> Vec<Vec<f64>> {
    let h = grid.h();
    let modes: Vec<Vec<f64>> = (0..n_modes)
        .map(|k| (0..grid.n_x).map(|i| mode(k, grid.x(i), grid.l)).collect())
        .collect();
    (0..=grid.n_t)
        .map(|kt| modes.iter().map(|mk| quad::inner_x(mk, field.row(kt), h)).collect())
        .collect()
}

/// Closed-form optimal solution of the built-in reference instance
/// ([`crate::model::reference_instance`]): the control rides its upper bound
/// on (0, log 2), holds the state constraint active on (log 2, 2), and tracks
/// the target in the interior of the box on (2, 3).
#[derive(Debug, Clone, Copy)]
pub struct ReferenceSolution;

/// The two interior junction times of the reference solution.
pub const REFERENCE_JUNCTIONS: [f64; 2] = [std::f64::consts::LN_2, 2.0];

pub fn reference_solution() -> ReferenceSolution {
    ReferenceSolution
}

impl ReferenceSolution {
    /// Optimal control ū(t).
    pub fn control(&self, t: f64) -> f64 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        if t < std::f64::consts::LN_2 {
            pi2 + 1.0
        } else if t < 2.0 {
            pi2
        } else {
            pi2 - 1.0 / (4.0 - t)
        }
    }

    /// First modal coefficient ȳ₁(t) of the optimal state.
    pub fn state(&self, t: f64) -> f64 {
        if t < std::f64::consts::LN_2 {
            t.exp()
        } else if t < 2.0 {
            2.0
        } else {
            4.0 - t
        }
    }

    /// Time factor ŷ_d(t) of the tracking target.
    pub fn target(&self, t: f64) -> f64 {
        if t < std::f64::consts::LN_2 {
            1.5 * t.exp()
        } else if t < 1.0 {
            3.0
        } else {
            4.0 - t
        }
    }

    /// First modal coefficient p₁(t) of the costate: negative on the bang arc,
    /// identically zero from the first junction on.
    pub fn costate(&self, t: f64) -> f64 {
        if t < std::f64::consts::LN_2 {
            0.25 * t.exp() - (-t).exp()
        } else {
            0.0
        }
    }

    /// Density μ̇₁(t) of the state-constraint multiplier, supported on the
    /// constrained arc.
    pub fn mu_density(&self, t: f64) -> f64 {
        if t <= std::f64::consts::LN_2 || t >= 2.0 {
            0.0
        } else {
            self.target(t) - 2.0
        }
    }

    /// Optimal cost, computed once by adaptive quadrature of the tracking
    /// integrand over the smooth pieces (the terminal and control terms both
    /// vanish at the optimum).
    pub fn optimal_cost(&self) -> f64 {
        static CACHE: OnceLock<f64> = OnceLock::new();
        *CACHE.get_or_init(|| {
            let integrand = |t: f64| {
                let d = self.state(t) - self.target(t);
                d * d
            };
            let log2 = std::f64::consts::LN_2;
            let pieces = [(0.0, log2), (log2, 1.0), (1.0, 2.0), (2.0, 3.0)];
            let total: f64 =
                pieces.iter().map(|&(a, b)| adaptive_simpson(&integrand, a, b, 1e-13)).sum();
            0.5 * total
        })
    }

    /// Sample every evaluator on a uniform time grid; rows
    /// `(t, u, y1, yd, p1, mu_dot)`.
    pub fn sample_table(&self, n: usize) -> Vec<[f64; 6]> {
        (0..=n)
            .map(|k| {
                let t = 3.0 * k as f64 / n as f64;
                [t, self.control(t), self.state(t), self.target(t), self.costate(t), self.mu_density(t)]
            })
            .collect()
    }
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson_rule<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson_rule(f, a, m);
        let right = simpson_rule(f, m, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, m, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, right, tol / 2.0, depth - 1)
        }
    }
    recurse(f, a, b, simpson_rule(f, a, b), tol, 40)
}
