//! Box-constrained mixed complementarity problems.
//!
//! Find `z` in `[l, u]` such that for every index `j` one of
//!
//! * `F_j(z) = 0` and `l_j < z_j < u_j`,
//! * `F_j(z) > 0` and `z_j = l_j`,
//! * `F_j(z) < 0` and `z_j = u_j`
//!
//! holds. The solver is a projected, damped semismooth Newton method on the
//! mid-function reformulation `r(z) = z - mid(l, z - F(z), u) = 0`. When its
//! line search stalls, a smoothed Fischer–Burmeister continuation moves the
//! iterate and then returns control to the mid-function steps.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

type VectorFn<'a> = Box<dyn Fn(&Vector) -> Vector + Send + Sync + 'a>;
type MatrixFn<'a> = Box<dyn Fn(&Vector) -> Matrix + Send + Sync + 'a>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("lower bound exceeds upper bound at index {0}")]
    InvertedBounds(usize),
    #[error("point is not an approximate solution (residual {residual:e} > {limit:e})")]
    InvalidPoint { residual: f64, limit: f64 },
}

/// `F(z) ⊥ l ≤ z ≤ u` with a dense Jacobian callback.
///
/// Infinite bounds are IEEE infinities.
pub struct McpProblem<'a> {
    lower: Vector,
    upper: Vector,
    func: VectorFn<'a>,
    jac: MatrixFn<'a>,
}

impl<'a> McpProblem<'a> {
    pub fn new<F, J>(lower: Vector, upper: Vector, func: F, jac: J) -> Result<Self, McpError>
    where
        F: Fn(&Vector) -> Vector + Send + Sync + 'a,
        J: Fn(&Vector) -> Matrix + Send + Sync + 'a,
    {
        if lower.len() != upper.len() {
            return Err(McpError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if let Some(j) = (0..lower.len()).find(|&j| !(lower[j] <= upper[j])) {
            return Err(McpError::InvertedBounds(j));
        }
        Ok(Self {
            lower,
            upper,
            func: Box::new(func),
            jac: Box::new(jac),
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &Vector {
        &self.lower
    }

    pub fn upper(&self) -> &Vector {
        &self.upper
    }

    pub fn eval_f(&self, z: &Vector) -> Vector {
        (self.func)(z)
    }

    pub fn eval_jacobian(&self, z: &Vector) -> Matrix {
        (self.jac)(z)
    }

    pub fn project(&self, z: &Vector) -> Vector {
        Vector::from_fn(z.len(), |j, _| z[j].max(self.lower[j]).min(self.upper[j]))
    }

    fn check_len(&self, z: &Vector) -> Result<(), McpError> {
        if z.len() != self.dim() {
            return Err(McpError::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Infinity-norm target for the mid-function residual.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Backtracking contraction factor.
    pub backtrack: f64,
    pub min_step: f64,
    /// First diagonal shift tried when the Newton matrix is singular.
    pub reg_initial: f64,
    pub reg_growth: f64,
    pub reg_max: f64,
    /// Starting `μ` of the smoothed Fischer–Burmeister continuation; zero
    /// disables it.
    pub smoothing_initial: f64,
    pub smoothing_decrease: f64,
    /// `μ` at which the continuation returns to mid-function steps.
    pub smoothing_handoff: f64,
    /// `μ` is reduced once `‖Φ_μ‖∞ ≤ smoothing_target · √μ`.
    pub smoothing_target: f64,
    /// A phase counts as stalled when its residual has not fallen below
    /// `stagnation_ratio` times its value `stagnation_window` iterations
    /// earlier. A zero window disables the test.
    pub stagnation_window: usize,
    pub stagnation_ratio: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 200,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-10,
            reg_initial: 1e-8,
            reg_growth: 10.0,
            reg_max: 1e-2,
            smoothing_initial: 1.0,
            smoothing_decrease: 0.3,
            smoothing_handoff: 1e-6,
            smoothing_target: 1.0,
            stagnation_window: 10,
            stagnation_ratio: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Converged,
    /// Iteration budget spent, or the line search stalled before reaching tolerance.
    MaxIterations,
    SingularSystem,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McpSolution {
    pub z: Vector,
    pub residual_inf: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

impl McpSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// `max(l, min(w, u))`, which equals the median of `(l, w, u)` when `l ≤ u`.
#[inline]
pub fn mid(lower: f64, w: f64, upper: f64) -> f64 {
    lower.max(w.min(upper))
}

fn residual_from(problem: &McpProblem<'_>, z: &Vector, f: &Vector) -> Vector {
    Vector::from_fn(z.len(), |j, _| {
        z[j] - mid(problem.lower[j], z[j] - f[j], problem.upper[j])
    })
}

/// Componentwise mid-function residual `z - mid(l, z - F(z), u)`.
pub fn fb_residual(problem: &McpProblem<'_>, z: &Vector) -> Vector {
    let f = problem.eval_f(z);
    residual_from(problem, z, &f)
}

fn merit(r: &Vector) -> f64 {
    0.5 * r.norm_squared()
}

fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Solves `a x = b`, shifting the diagonal by `+δI` on failure.
///
/// Returns `None` once `δ` would exceed `opts.reg_max`.
fn regularized_solve(a: &Matrix, b: &Vector, opts: &SolverOptions) -> Option<Vector> {
    if a.nrows() == 0 {
        return Some(Vector::zeros(0));
    }
    use faer::linalg::solvers::Solve;
    let n = a.nrows();
    let rhs = faer::Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
    let mut shift = 0.0;
    loop {
        let m = faer::Mat::<f64>::from_fn(n, n, |i, j| if i == j { a[(i, j)] + shift } else { a[(i, j)] });
        let lu = m.partial_piv_lu();
        let u = lu.U();
        let (mut dmin, mut dmax) = (f64::INFINITY, 0.0_f64);
        for i in 0..n {
            let d = u[(i, i)].abs();
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
        if dmax.is_finite() && dmin > 1e-14 * dmax.max(1e-300) {
            let x = lu.solve(&rhs);
            if (0..n).all(|i| x[(i, 0)].is_finite()) {
                return Some(Vector::from_fn(n, |i, _| x[(i, 0)]));
            }
        }
        shift = if shift == 0.0 {
            opts.reg_initial
        } else {
            shift * opts.reg_growth
        };
        if shift > opts.reg_max * (1.0 + 1e-12) {
            return None;
        }
    }
}

/// Semismooth Newton direction on the mid-function residual.
///
/// Indices where `z - F(z)` is clamped to a bound have residual rows
/// `z_j - bound`, so their step is fixed to `-r_j` and they drop out of the
/// linear system.
fn newton_direction(
    problem: &McpProblem<'_>,
    z: &Vector,
    f: &Vector,
    r: &Vector,
    jac: &Matrix,
    opts: &SolverOptions,
) -> Option<Vector> {
    let n = z.len();
    let mut free = Vec::with_capacity(n);
    let mut d = Vector::zeros(n);
    for j in 0..n {
        let w = z[j] - f[j];
        if w > problem.lower[j] && w < problem.upper[j] {
            free.push(j);
        } else {
            d[j] = -r[j];
        }
    }
    let k = free.len();
    let mut a = Matrix::zeros(k, k);
    let mut b = Vector::zeros(k);
    for (row, &i) in free.iter().enumerate() {
        let mut rhs = -r[i];
        for j in 0..n {
            if d[j] != 0.0 {
                rhs -= jac[(i, j)] * d[j];
            }
        }
        b[row] = rhs;
        for (col, &j) in free.iter().enumerate() {
            a[(row, col)] = jac[(i, j)];
        }
    }
    let x = regularized_solve(&a, &b, opts)?;
    for (row, &i) in free.iter().enumerate() {
        d[i] = x[row];
    }
    Some(d)
}

struct Trial {
    z: Vector,
    f: Vector,
    r: Vector,
    merit: f64,
}

fn evaluate(problem: &McpProblem<'_>, z: Vector) -> Trial {
    let f = problem.eval_f(&z);
    let r = residual_from(problem, &z, &f);
    let merit = merit(&r);
    Trial { z, f, r, merit }
}

fn line_search(
    problem: &McpProblem<'_>,
    current: &Trial,
    direction: &Vector,
    slope: f64,
    opts: &SolverOptions,
) -> Option<Trial> {
    let mut step = 1.0;
    while step >= opts.min_step {
        let trial = evaluate(problem, problem.project(&(&current.z + direction * step)));
        if trial.merit.is_finite() && trial.merit <= current.merit - opts.armijo * step * slope {
            return Some(trial);
        }
        step *= opts.backtrack;
    }
    None
}

/// Smoothed Fischer–Burmeister function `φ_μ(a, b) = √(a² + b² + 2μ) − a − b`
/// and one element of its generalized gradient.
fn fischer(a: f64, b: f64, mu: f64) -> (f64, f64, f64) {
    if a.is_infinite() || b.is_infinite() {
        // φ → −(the finite argument) as the other grows without bound.
        return if a == f64::INFINITY && b.is_finite() {
            (-b, 0.0, -1.0)
        } else if b == f64::INFINITY && a.is_finite() {
            (-a, -1.0, 0.0)
        } else {
            (f64::INFINITY, 0.0, 0.0)
        };
    }
    let r = (a * a + b * b + 2.0 * mu).sqrt();
    if r == 0.0 {
        let g = std::f64::consts::FRAC_1_SQRT_2 - 1.0;
        return (0.0, g, g);
    }
    (r - a - b, a / r - 1.0, b / r - 1.0)
}

/// Box Fischer–Burmeister residual `Φ_j` and the diagonal factors of its
/// generalized Jacobian `diag(da) + diag(db) ∇F`.
fn fb_system(problem: &McpProblem<'_>, z: &Vector, f: &Vector, mu: f64) -> (Vector, Vector, Vector) {
    let n = z.len();
    let mut phi = Vector::zeros(n);
    let mut da = Vector::zeros(n);
    let mut db = Vector::zeros(n);
    for j in 0..n {
        let (l, u) = (problem.lower[j], problem.upper[j]);
        let (v, a, b) = if l == u {
            (z[j] - l, 1.0, 0.0)
        } else if l.is_finite() && u.is_finite() {
            let (inner, ia, ib) = fischer(u - z[j], -f[j], mu);
            let (outer, oa, ob) = fischer(z[j] - l, inner, mu);
            (outer, oa - ob * ia, -ob * ib)
        } else if l.is_finite() {
            fischer(z[j] - l, f[j], mu)
        } else if u.is_finite() {
            let (v, a, b) = fischer(u - z[j], -f[j], mu);
            (-v, a, b)
        } else {
            (-f[j], 0.0, -1.0)
        };
        phi[j] = v;
        da[j] = a;
        db[j] = b;
    }
    (phi, da, db)
}

struct FbTrial {
    z: Vector,
    f: Vector,
    phi: Vector,
    merit: f64,
}

fn fb_evaluate(problem: &McpProblem<'_>, z: Vector, mu: f64) -> FbTrial {
    let f = problem.eval_f(&z);
    let (phi, _, _) = fb_system(problem, &z, &f, mu);
    let merit = merit(&phi);
    FbTrial { z, f, phi, merit }
}

fn fb_line_search(
    problem: &McpProblem<'_>,
    current: &FbTrial,
    direction: &Vector,
    slope: f64,
    mu: f64,
    opts: &SolverOptions,
) -> Option<FbTrial> {
    let mut step = 1.0;
    while step >= opts.min_step {
        let trial = fb_evaluate(problem, &current.z + direction * step, mu);
        if trial.merit.is_finite() && trial.merit <= current.merit + opts.armijo * step * slope {
            return Some(trial);
        }
        step *= opts.backtrack;
    }
    None
}

enum Phase {
    Converged(Vector),
    /// No acceptable step; `singular` when the Newton system itself failed.
    Stalled { z: Vector, singular: bool },
    Budget(Vector),
    Diverged(Vector),
}

/// Damped semismooth Newton on the mid-function residual.
/// True when the last `window` iterations failed to shrink `history` by
/// the required ratio.
fn stagnated(history: &[f64], opts: &SolverOptions) -> bool {
    let w = opts.stagnation_window;
    w > 0 && history.len() > w && history[history.len() - 1] > opts.stagnation_ratio * history[history.len() - 1 - w]
}

fn minmap_phase(problem: &McpProblem<'_>, z0: Vector, iterations: &mut usize, opts: &SolverOptions) -> Phase {
    let mut current = evaluate(problem, problem.project(&z0));
    let mut history = Vec::new();
    loop {
        let res = inf_norm(&current.r);
        if !res.is_finite() {
            return Phase::Diverged(current.z);
        }
        if res <= opts.tolerance {
            return Phase::Converged(current.z);
        }
        history.push(res);
        if stagnated(&history, opts) {
            return Phase::Stalled { z: current.z, singular: false };
        }
        if *iterations >= opts.max_iterations {
            return Phase::Budget(current.z);
        }
        *iterations += 1;

        let jac = problem.eval_jacobian(&current.z);
        if jac.iter().any(|v| !v.is_finite()) {
            return Phase::Diverged(current.z);
        }
        let Some(d) = newton_direction(problem, &current.z, &current.f, &current.r, &jac, opts) else {
            return Phase::Stalled { z: current.z, singular: true };
        };
        match line_search(problem, &current, &d, 2.0 * current.merit, opts) {
            Some(t) => current = t,
            None => return Phase::Stalled { z: current.z, singular: false },
        }
    }
}

/// Newton method on the smoothed Fischer–Burmeister system with `μ` driven
/// to zero. Hands back once `μ` falls below `opts.smoothing_handoff` (or on
/// convergence of the mid-function residual).
fn smoothing_phase(
    problem: &McpProblem<'_>,
    z0: Vector,
    mu0: f64,
    iterations: &mut usize,
    opts: &SolverOptions,
) -> (Phase, f64) {
    let mut mu = mu0;
    let mut current = fb_evaluate(problem, z0, mu);
    let mut history: Vec<f64> = Vec::new();
    loop {
        let projected = problem.project(&current.z);
        let f = problem.eval_f(&projected);
        let res = inf_norm(&residual_from(problem, &projected, &f));
        if !res.is_finite() || !current.merit.is_finite() {
            return (Phase::Diverged(projected), mu);
        }
        if res <= opts.tolerance {
            return (Phase::Converged(projected), mu);
        }
        if inf_norm(&current.phi) <= opts.smoothing_target * mu.max(f64::MIN_POSITIVE).sqrt() {
            if mu > 0.0 && mu <= opts.smoothing_handoff {
                return (Phase::Stalled { z: current.z, singular: false }, mu * opts.smoothing_decrease);
            }
            if mu > 0.0 {
                mu *= opts.smoothing_decrease;
                current = fb_evaluate(problem, current.z, mu);
                history.clear();
                continue;
            }
        }
        history.push(inf_norm(&current.phi));
        let stuck = stagnated(&history, opts);
        if *iterations >= opts.max_iterations {
            return (Phase::Budget(projected), mu);
        }
        *iterations += 1;

        let jac = problem.eval_jacobian(&current.z);
        if jac.iter().any(|v| !v.is_finite()) {
            return (Phase::Diverged(projected), mu);
        }
        let (_, da, db) = fb_system(problem, &current.z, &current.f, mu);
        let mut h = jac;
        for i in 0..h.nrows() {
            for j in 0..h.ncols() {
                h[(i, j)] *= db[i];
            }
            h[(i, i)] += da[i];
        }
        let grad = h.transpose() * &current.phi;
        let mut next = None;
        let newton = regularized_solve(&h, &(-&current.phi), opts);
        if let Some(d) = &newton {
            let slope = grad.dot(d);
            if slope < -1e-12 * d.norm_squared() {
                next = fb_line_search(problem, &current, d, slope, mu, opts);
            }
        }
        if next.is_none() {
            let gg = grad.norm_squared();
            if gg > 0.0 && gg.is_finite() {
                next = fb_line_search(problem, &current, &(-&grad), -gg, mu, opts);
            }
        }
        match next {
            Some(t) if !stuck => current = t,
            Some(t) if mu > 0.0 => {
                // Stuck at this smoothing level; tighten and keep going.
                mu = if mu <= opts.smoothing_handoff { 0.0 } else { mu * opts.smoothing_decrease };
                current = fb_evaluate(problem, t.z, mu);
                history.clear();
            }
            Some(t) => current = t,
            None if mu > 0.0 => {
                mu = if mu <= opts.smoothing_handoff { 0.0 } else { mu * opts.smoothing_decrease };
                current = fb_evaluate(problem, current.z, mu);
                history.clear();
            }
            None => return (Phase::Stalled { z: projected, singular: newton.is_none() }, 0.0),
        }
    }
}

/// Solves the complementarity problem from `z0` (projected onto the box).
///
/// Damped Newton steps on the mid-function residual are tried first. If
/// their line search stalls, a smoothed Fischer–Burmeister continuation
/// takes over and hands the point back to the mid-function iteration once
/// the smoothing is small. Convergence is always judged on the
/// mid-function residual.
pub fn solve_mcp(problem: &McpProblem<'_>, z0: &Vector, opts: &SolverOptions) -> Result<McpSolution, McpError> {
    problem.check_len(z0)?;
    let mut iterations = 0;
    let mut mu = opts.smoothing_initial;
    let mut z = problem.project(z0);
    let status = loop {
        match minmap_phase(problem, z.clone(), &mut iterations, opts) {
            Phase::Converged(t) => {
                z = t;
                break SolveStatus::Converged;
            }
            Phase::Budget(t) => {
                z = t;
                break SolveStatus::MaxIterations;
            }
            Phase::Diverged(t) => {
                z = t;
                break SolveStatus::Diverged;
            }
            Phase::Stalled { z: t, singular } => {
                if mu <= 0.0 {
                    z = t;
                    break if singular { SolveStatus::SingularSystem } else { SolveStatus::MaxIterations };
                }
                let (phase, next_mu) = smoothing_phase(problem, t, mu, &mut iterations, opts);
                mu = next_mu;
                match phase {
                    Phase::Converged(t) => {
                        z = t;
                        break SolveStatus::Converged;
                    }
                    Phase::Budget(t) => {
                        z = t;
                        break SolveStatus::MaxIterations;
                    }
                    Phase::Diverged(t) => {
                        z = t;
                        break SolveStatus::Diverged;
                    }
                    Phase::Stalled { z: t, singular } => {
                        if mu <= 0.0 {
                            z = problem.project(&t);
                            break if singular { SolveStatus::SingularSystem } else { SolveStatus::MaxIterations };
                        }
                        z = t;
                    }
                }
            }
        }
    };
    let current = evaluate(problem, problem.project(&z));
    Ok(McpSolution {
        residual_inf: inf_norm(&current.r),
        z: current.z,
        iterations,
        status,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSide {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegenerateIndex {
    pub index: usize,
    pub side: BoundSide,
}

/// Which of the three complementarity cases each index satisfies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IndexClassification {
    pub interior: Vec<usize>,
    pub at_lower: Vec<usize>,
    pub at_upper: Vec<usize>,
    /// At a bound with `|F_j|` inside the activity tolerance.
    pub degenerate: Vec<DegenerateIndex>,
}

impl IndexClassification {
    pub fn degenerate_indices(&self) -> Vec<usize> {
        self.degenerate.iter().map(|d| d.index).collect()
    }

    pub fn len(&self) -> usize {
        self.interior.len() + self.at_lower.len() + self.at_upper.len() + self.degenerate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const DEFAULT_ACTIVITY_TOL: f64 = 1e-6;

/// Activity tolerance scaled by `max(1, ‖z‖∞)`.
pub fn scaled_activity_tol(act_tol: f64, z: &Vector) -> f64 {
    act_tol * inf_norm(z).max(1.0)
}

pub fn classify_indices(
    problem: &McpProblem<'_>,
    z: &Vector,
    act_tol: f64,
) -> Result<IndexClassification, McpError> {
    problem.check_len(z)?;
    let f = problem.eval_f(z);
    classify_with_values(problem.lower(), problem.upper(), z, &f, act_tol)
}

/// Classification from precomputed `F(z)`.
pub fn classify_with_values(
    lower: &Vector,
    upper: &Vector,
    z: &Vector,
    f: &Vector,
    act_tol: f64,
) -> Result<IndexClassification, McpError> {
    let tol = scaled_activity_tol(act_tol, z);
    let residual = inf_norm(&Vector::from_fn(z.len(), |j, _| z[j] - mid(lower[j], z[j] - f[j], upper[j])));
    let limit = 100.0 * tol;
    if !(residual <= limit) {
        return Err(McpError::InvalidPoint { residual, limit });
    }
    let mut out = IndexClassification::default();
    for j in 0..z.len() {
        let near_lower = z[j] - lower[j] <= tol;
        let near_upper = upper[j] - z[j] <= tol;
        let small = f[j].abs() <= tol;
        if near_lower && f[j] > tol {
            out.at_lower.push(j);
        } else if near_upper && f[j] < -tol {
            out.at_upper.push(j);
        } else if small && (near_lower || near_upper) {
            let side = if near_lower { BoundSide::Lower } else { BoundSide::Upper };
            out.degenerate.push(DegenerateIndex { index: j, side });
        } else {
            out.interior.push(j);
        }
    }
    Ok(out)
}
