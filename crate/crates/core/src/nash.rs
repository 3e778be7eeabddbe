//! Generalized Nash equilibria through the stacked KKT conditions of both
//! players, posed as one mixed complementarity problem.
//!
//! A converged point is a first-order point of both players' problems; it is
//! used as a proxy for an equilibrium, not certified as one.

use std::ops::Range;

use thiserror::Error;

use crate::mcp::{self, Matrix, McpError, McpProblem, SolveStatus, SolverOptions, Vector};
use crate::problems::{GameError, TwoPlayerGame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("solver did not converge ({status:?}, residual {residual:e})")]
    NoConvergence { status: SolveStatus, residual: f64 },
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Mcp(#[from] McpError),
}

/// Multiplier ranges of one player inside the stacked vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualRanges {
    pub ineq: Range<usize>,
    pub eq: Range<usize>,
}

impl DualRanges {
    pub fn all(&self) -> Range<usize> {
        self.ineq.start..self.eq.end
    }
}

/// `z = (x, λ_1, λ_2)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KktLayout {
    pub primal: Range<usize>,
    pub duals: [DualRanges; 2],
    pub total_dim: usize,
}

impl KktLayout {
    pub fn for_game(game: &TwoPlayerGame) -> Self {
        let n = game.n_total();
        let p1 = game.player(0);
        let p2 = game.player(1);
        let d1 = DualRanges {
            ineq: n..n + p1.m_ineq(),
            eq: n + p1.m_ineq()..n + p1.m(),
        };
        let s2 = n + p1.m();
        let d2 = DualRanges {
            ineq: s2..s2 + p2.m_ineq(),
            eq: s2 + p2.m_ineq()..s2 + p2.m(),
        };
        Self {
            primal: 0..n,
            duals: [d1, d2],
            total_dim: s2 + p2.m(),
        }
    }

    pub fn bounds(&self) -> (Vector, Vector) {
        let mut lower = Vector::from_element(self.total_dim, f64::NEG_INFINITY);
        let upper = Vector::from_element(self.total_dim, f64::INFINITY);
        for d in &self.duals {
            for j in d.ineq.clone() {
                lower[j] = 0.0;
            }
        }
        (lower, upper)
    }
}

fn stacked_f(game: &TwoPlayerGame, layout: &KktLayout, z: &Vector) -> Vector {
    let n = game.n_total();
    let x = z.rows(0, n).into_owned();
    let mut f = Vector::zeros(layout.total_dim);
    for i in 0..2 {
        let p = game.player(i);
        let block = game.block(i);
        let dr = layout.duals[i].all();
        let lam = z.rows(dr.start, dr.len());
        let grad = p.cost_gradient(&x);
        let jac = p.constraint_jacobian(&x);
        for r in block {
            f[r] = grad[r] - jac.column(r).dot(&lam);
        }
        f.rows_mut(dr.start, dr.len()).copy_from(&p.constraints(&x));
    }
    f
}

fn stacked_jacobian(game: &TwoPlayerGame, layout: &KktLayout, z: &Vector) -> Matrix {
    let n = game.n_total();
    let x = z.rows(0, n).into_owned();
    let mut jm = Matrix::zeros(layout.total_dim, layout.total_dim);
    for i in 0..2 {
        let p = game.player(i);
        let block = game.block(i);
        let dr = layout.duals[i].all();
        let lam = z.rows(dr.start, dr.len()).into_owned();
        let hess = p.lagrangian_hessian(&x, &lam);
        let jac = p.constraint_jacobian(&x);
        for r in block.clone() {
            for c in 0..n {
                jm[(r, c)] = hess[(r, c)];
            }
            for (k, c) in dr.clone().enumerate() {
                jm[(r, c)] = -jac[(k, r)];
            }
        }
        for (k, r) in dr.enumerate() {
            for c in 0..n {
                jm[(r, c)] = jac[(k, c)];
            }
        }
    }
    jm
}

/// Stacks both players' stationarity rows, then both players' constraint
/// rows, with free primal variables, nonnegative inequality multipliers and
/// free equality multipliers.
pub fn assemble_kkt_mcp(game: &TwoPlayerGame) -> Result<McpProblem<'_>, EquilibriumError> {
    for i in 0..2 {
        let block = game.block(i);
        if block.len() != game.player(i).n_own() {
            return Err(GameError::DimensionMismatch {
                expected: game.player(i).n_own(),
                got: block.len(),
            }
            .into());
        }
    }
    let layout = KktLayout::for_game(game);
    let (lower, upper) = layout.bounds();
    let l1 = layout.clone();
    let l2 = layout;
    Ok(McpProblem::new(
        lower,
        upper,
        move |z: &Vector| stacked_f(game, &l1, z),
        move |z: &Vector| stacked_jacobian(game, &l2, z),
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub x: Vector,
    pub duals: [Vector; 2],
    pub status: SolveStatus,
    /// Mid-function residual of the stacked KKT system.
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Starting point of the solve, kept for reproducibility.
    pub z0: Vector,
}

/// Solves the stacked KKT system from `x0` and optional multiplier warm
/// starts (zeros otherwise).
pub fn solve_nash(
    game: &TwoPlayerGame,
    x0: &Vector,
    duals0: Option<&[Vector; 2]>,
    opts: &SolverOptions,
) -> Result<EquilibriumResult, EquilibriumError> {
    game.check_x(x0)?;
    let layout = KktLayout::for_game(game);
    let problem = assemble_kkt_mcp(game)?;
    let mut z0 = Vector::zeros(layout.total_dim);
    z0.rows_mut(0, x0.len()).copy_from(x0);
    if let Some(d) = duals0 {
        for i in 0..2 {
            let r = layout.duals[i].all();
            if d[i].len() != r.len() {
                return Err(GameError::DimensionMismatch {
                    expected: r.len(),
                    got: d[i].len(),
                }
                .into());
            }
            z0.rows_mut(r.start, r.len()).copy_from(&d[i]);
        }
    }
    let sol = mcp::solve_mcp(&problem, &z0, opts)?;
    if !sol.converged() {
        return Err(EquilibriumError::NoConvergence {
            status: sol.status,
            residual: sol.residual_inf,
        });
    }
    let n = game.n_total();
    let duals = [0, 1].map(|i| {
        let r = layout.duals[i].all();
        sol.z.rows(r.start, r.len()).into_owned()
    });
    Ok(EquilibriumResult {
        x: sol.z.rows(0, n).into_owned(),
        duals,
        status: sol.status,
        kkt_residual: sol.residual_inf,
        iterations: sol.iterations,
        z0,
    })
}

/// First-order certificate of one player's problem at `(x, λ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktCertificate {
    /// ‖∇ₓᵢ f − (∇ₓᵢ g)ᵀλ‖∞.
    pub stationarity: f64,
    /// Most negative inequality value or largest |equality| (as a negative number).
    pub min_feasibility: f64,
    pub min_dual: f64,
    pub max_complementarity: f64,
}

impl KktCertificate {
    pub fn passes(&self, tol: f64) -> bool {
        self.stationarity <= tol
            && self.min_feasibility >= -tol
            && self.min_dual >= -1e-10
            && self.max_complementarity <= tol
    }
}

pub fn kkt_certificate(game: &TwoPlayerGame, i: usize, x: &Vector, duals: &Vector) -> KktCertificate {
    let p = game.player(i);
    let block = game.block(i);
    let grad = p.cost_gradient(x);
    let jac = p.constraint_jacobian(x);
    let g = p.constraints(x);
    let mut stationarity = 0.0_f64;
    for r in block {
        stationarity = stationarity.max((grad[r] - jac.column(r).dot(duals)).abs());
    }
    let mut min_feasibility = 0.0_f64;
    let mut min_dual = 0.0_f64;
    let mut max_complementarity = 0.0_f64;
    for j in 0..p.m() {
        if j < p.m_ineq() {
            min_feasibility = min_feasibility.min(g[j]);
            min_dual = min_dual.min(duals[j]);
            max_complementarity = max_complementarity.max((duals[j] * g[j]).abs());
        } else {
            min_feasibility = min_feasibility.min(-g[j].abs());
        }
    }
    KktCertificate {
        stationarity,
        min_feasibility,
        min_dual,
        max_complementarity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::PlayerProblem;

    pub(crate) fn linear_chase() -> TwoPlayerGame {
        let p1 = PlayerProblem::unconstrained(
            1,
            |x: &Vector| (x[0] - x[1]).powi(2),
            |x: &Vector| Vector::from_vec(vec![2.0 * (x[0] - x[1]), -2.0 * (x[0] - x[1])]),
            |_x: &Vector| Matrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]),
        );
        let p2 = PlayerProblem::unconstrained(
            1,
            |x: &Vector| (x[1] - x[0] / 2.0 - 1.0).powi(2),
            |x: &Vector| {
                let e = x[1] - x[0] / 2.0 - 1.0;
                Vector::from_vec(vec![-e, 2.0 * e])
            },
            |_x: &Vector| Matrix::from_row_slice(2, 2, &[0.5, -1.0, -1.0, 2.0]),
        );
        TwoPlayerGame::new(p1, p2)
    }

    #[test]
    fn quadratic_chase_equilibrium() {
        let g = linear_chase();
        let r = solve_nash(&g, &Vector::zeros(2), None, &SolverOptions::default()).unwrap();
        assert!((r.x[0] - 2.0).abs() <= 1e-8);
        assert!((r.x[1] - 2.0).abs() <= 1e-8);
    }

    #[test]
    fn decoupled_minima_at_origin() {
        let p = |k: usize| {
            PlayerProblem::unconstrained(
                2,
                move |x: &Vector| x.rows(2 * k, 2).norm_squared(),
                move |x: &Vector| {
                    let mut g = Vector::zeros(4);
                    g.rows_mut(2 * k, 2).copy_from(&(x.rows(2 * k, 2) * 2.0));
                    g
                },
                move |_x: &Vector| {
                    let mut h = Matrix::zeros(4, 4);
                    h[(2 * k, 2 * k)] = 2.0;
                    h[(2 * k + 1, 2 * k + 1)] = 2.0;
                    h
                },
            )
        };
        let g = TwoPlayerGame::new(p(0), p(1));
        let r = solve_nash(&g, &Vector::from_vec(vec![1.0, -2.0, 3.0, 0.5]), None, &SolverOptions::default())
            .unwrap();
        assert!(r.x.amax() <= 1e-12);
        let problem = assemble_kkt_mcp(&g).unwrap();
        assert_eq!(problem.dim(), 4);
    }

    #[test]
    fn inequality_rows_have_nonnegative_duals() {
        // Each player minimizes x_i^2 subject to x_i >= 1.
        let p = |k: usize| {
            PlayerProblem::new(
                1,
                1,
                0,
                move |x: &Vector| x[k] * x[k],
                move |x: &Vector| {
                    let mut g = Vector::zeros(2);
                    g[k] = 2.0 * x[k];
                    g
                },
                move |x: &Vector| Vector::from_element(1, x[k] - 1.0),
                move |_x: &Vector| {
                    let mut j = Matrix::zeros(1, 2);
                    j[(0, k)] = 1.0;
                    j
                },
                move |_x: &Vector, _l: &Vector| {
                    let mut h = Matrix::zeros(2, 2);
                    h[(k, k)] = 2.0;
                    h
                },
            )
        };
        let g = TwoPlayerGame::new(p(0), p(1));
        let problem = assemble_kkt_mcp(&g).unwrap();
        assert_eq!(problem.dim(), 4);
        assert_eq!(problem.lower()[2], 0.0);
        assert_eq!(problem.upper()[2], f64::INFINITY);
        let z = Vector::from_vec(vec![3.0, 4.0, 0.0, 0.0]);
        let f = problem.eval_f(&z);
        assert_eq!(f[2], 2.0);
        assert_eq!(f[3], 3.0);

        let r = solve_nash(&g, &Vector::zeros(2), None, &SolverOptions::default()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-10);
        assert!((r.duals[0][0] - 2.0).abs() < 1e-10);
        let cert = kkt_certificate(&g, 1, &r.x, &r.duals[1]);
        assert!(cert.passes(1e-8));
    }

    #[test]
    fn wrong_dual_warm_start_length() {
        let g = linear_chase();
        let bad = [Vector::zeros(1), Vector::zeros(0)];
        assert!(solve_nash(&g, &Vector::zeros(2), Some(&bad), &SolverOptions::default()).is_err());
    }
}
