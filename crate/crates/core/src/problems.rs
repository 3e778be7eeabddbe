//! Two-player constrained games with analytic derivative callbacks.
//!
//! Every callback takes the joint decision vector `x = [x_1; x_2]`.
//! Constraint vectors are ordered inequalities (`g ≥ 0`) first, then
//! equalities (`h = 0`).

use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use crate::mcp::{Matrix, Vector};

type ScalarFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
type HessianFn = Arc<dyn Fn(&Vector, &Vector) -> Matrix + Send + Sync>;
type SparseFn = Arc<dyn Fn(&Vector, &Vector) -> SparseDerivatives + Send + Sync>;

/// Lagrangian Hessian and constraint Jacobian as `(row, col, value)`
/// triplets; repeated positions add.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseDerivatives {
    pub hessian: Vec<(usize, usize, f64)>,
    pub jacobian: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("player {player} callback returned a non-finite value")]
    NonFinite { player: usize },
    #[error("player index {0} out of range")]
    BadPlayer(usize),
}

/// One player's cost and constraints.
#[derive(Clone)]
pub struct PlayerProblem {
    n_own: usize,
    m_ineq: usize,
    m_eq: usize,
    cost: ScalarFn,
    cost_grad: VectorFn,
    cons: VectorFn,
    cons_jac: MatrixFn,
    lagrangian_hess: HessianFn,
    sparse: Option<SparseFn>,
}

impl PlayerProblem {
    /// `cost_grad` is the gradient over the joint vector, `cons_jac` the
    /// `m × n` Jacobian over the joint vector, and `lagrangian_hess(x, λ)` the
    /// joint Hessian of `f(x) - λᵀ g(x)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_own: usize,
        m_ineq: usize,
        m_eq: usize,
        cost: impl Fn(&Vector) -> f64 + Send + Sync + 'static,
        cost_grad: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        cons: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        cons_jac: impl Fn(&Vector) -> Matrix + Send + Sync + 'static,
        lagrangian_hess: impl Fn(&Vector, &Vector) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        Self {
            n_own,
            m_ineq,
            m_eq,
            cost: Arc::new(cost),
            cost_grad: Arc::new(cost_grad),
            cons: Arc::new(cons),
            cons_jac: Arc::new(cons_jac),
            lagrangian_hess: Arc::new(lagrangian_hess),
            sparse: None,
        }
    }

    /// Supplies a sparse form of the second-order callbacks. It must agree
    /// with `lagrangian_hess` and `cons_jac`.
    pub fn with_sparse_derivatives(
        mut self,
        f: impl Fn(&Vector, &Vector) -> SparseDerivatives + Send + Sync + 'static,
    ) -> Self {
        self.sparse = Some(Arc::new(f));
        self
    }

    pub fn unconstrained(
        n_own: usize,
        cost: impl Fn(&Vector) -> f64 + Send + Sync + 'static,
        cost_grad: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        cost_hess: impl Fn(&Vector) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            n_own,
            0,
            0,
            cost,
            cost_grad,
            |_x: &Vector| Vector::zeros(0),
            |x: &Vector| Matrix::zeros(0, x.len()),
            move |x: &Vector, _l: &Vector| cost_hess(x),
        )
    }

    pub fn n_own(&self) -> usize {
        self.n_own
    }

    pub fn m_ineq(&self) -> usize {
        self.m_ineq
    }

    pub fn m_eq(&self) -> usize {
        self.m_eq
    }

    pub fn m(&self) -> usize {
        self.m_ineq + self.m_eq
    }

    pub fn cost(&self, x: &Vector) -> f64 {
        (self.cost)(x)
    }

    pub fn cost_gradient(&self, x: &Vector) -> Vector {
        (self.cost_grad)(x)
    }

    pub fn constraints(&self, x: &Vector) -> Vector {
        (self.cons)(x)
    }

    pub fn constraint_jacobian(&self, x: &Vector) -> Matrix {
        (self.cons_jac)(x)
    }

    pub fn lagrangian_hessian(&self, x: &Vector, duals: &Vector) -> Matrix {
        (self.lagrangian_hess)(x, duals)
    }

    /// Sparse Hessian and Jacobian, read off the dense callbacks when no
    /// sparse form was supplied.
    pub fn sparse_derivatives(&self, x: &Vector, duals: &Vector) -> SparseDerivatives {
        if let Some(f) = &self.sparse {
            return f(x, duals);
        }
        let nonzeros = |m: &Matrix| {
            let mut out = Vec::new();
            for c in 0..m.ncols() {
                for r in 0..m.nrows() {
                    if m[(r, c)] != 0.0 {
                        out.push((r, c, m[(r, c)]));
                    }
                }
            }
            out
        };
        SparseDerivatives {
            hessian: nonzeros(&self.lagrangian_hessian(x, duals)),
            jacobian: nonzeros(&self.constraint_jacobian(x)),
        }
    }
}

/// Position of each player's block inside the joint vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    ranges: [Range<usize>; 2],
}

impl BlockLayout {
    pub fn new(n1: usize, n2: usize) -> Self {
        Self {
            ranges: [0..n1, n1..n1 + n2],
        }
    }

    pub fn block(&self, player: usize) -> Range<usize> {
        self.ranges[player].clone()
    }

    pub fn n_total(&self) -> usize {
        self.ranges[1].end
    }

    pub fn gather(&self, x: &Vector, player: usize) -> Vector {
        let r = self.block(player);
        x.rows(r.start, r.len()).into_owned()
    }

    pub fn scatter(&self, x: &mut Vector, player: usize, block: &Vector) {
        let r = self.block(player);
        x.rows_mut(r.start, r.len()).copy_from(block);
    }

    pub fn join(&self, x1: &Vector, x2: &Vector) -> Vector {
        let mut x = Vector::zeros(self.n_total());
        self.scatter(&mut x, 0, x1);
        self.scatter(&mut x, 1, x2);
        x
    }
}

#[derive(Clone)]
pub struct TwoPlayerGame {
    players: [PlayerProblem; 2],
    layout: BlockLayout,
}

/// Quantities needed for one player's stationarity conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerEvaluation {
    pub cost: f64,
    pub grad_own: Vector,
    pub constraints: Vector,
    pub jac_own: Matrix,
}

pub const fn other(player: usize) -> usize {
    1 - player
}

impl TwoPlayerGame {
    pub fn new(p1: PlayerProblem, p2: PlayerProblem) -> Self {
        let layout = BlockLayout::new(p1.n_own, p2.n_own);
        Self {
            players: [p1, p2],
            layout,
        }
    }

    pub fn player(&self, i: usize) -> &PlayerProblem {
        &self.players[i]
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn n_total(&self) -> usize {
        self.layout.n_total()
    }

    pub fn block(&self, i: usize) -> Range<usize> {
        self.layout.block(i)
    }

    pub fn check_x(&self, x: &Vector) -> Result<(), GameError> {
        if x.len() != self.n_total() {
            return Err(GameError::DimensionMismatch {
                expected: self.n_total(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn evaluate_player(&self, i: usize, x: &Vector) -> Result<PlayerEvaluation, GameError> {
        if i > 1 {
            return Err(GameError::BadPlayer(i));
        }
        self.check_x(x)?;
        let p = &self.players[i];
        let r = self.block(i);
        let cost = p.cost(x);
        let grad_own = p.cost_gradient(x).rows(r.start, r.len()).into_owned();
        let constraints = p.constraints(x);
        let jac_own = p.constraint_jacobian(x).columns(r.start, r.len()).into_owned();
        let finite = cost.is_finite()
            && grad_own.iter().all(|v| v.is_finite())
            && constraints.iter().all(|v| v.is_finite())
            && jac_own.iter().all(|v| v.is_finite());
        if !finite {
            return Err(GameError::NonFinite { player: i });
        }
        Ok(PlayerEvaluation {
            cost,
            grad_own,
            constraints,
            jac_own,
        })
    }

    /// Same game with the player labels exchanged.
    pub fn swapped(&self) -> Self {
        let n1 = self.players[0].n_own;
        let n2 = self.players[1].n_own;
        let to_orig = move |x: &Vector| -> Vector {
            // swapped layout is [x_2; x_1]
            let mut out = Vector::zeros(n1 + n2);
            out.rows_mut(0, n1).copy_from(&x.rows(n2, n1));
            out.rows_mut(n1, n2).copy_from(&x.rows(0, n2));
            out
        };
        let perm: Vec<usize> = (n1..n1 + n2).chain(0..n1).collect();
        let wrap = |p: &PlayerProblem| {
            let p1 = p.clone();
            let p2 = p.clone();
            let p3 = p.clone();
            let p4 = p.clone();
            let p5 = p.clone();
            let perm2 = perm.clone();
            let perm3 = perm.clone();
            let perm4 = perm.clone();
            let p6 = p.clone();
            // original index -> swapped index
            let inv = move |k: usize| if k < n1 { k + n2 } else { k - n1 };
            let sparse = move |x: &Vector, l: &Vector| {
                let d = p6.sparse_derivatives(&to_orig(x), l);
                SparseDerivatives {
                    hessian: d.hessian.into_iter().map(|(a, b, v)| (inv(a), inv(b), v)).collect(),
                    jacobian: d.jacobian.into_iter().map(|(r, c, v)| (r, inv(c), v)).collect(),
                }
            };
            let q = PlayerProblem::new(
                p.n_own,
                p.m_ineq,
                p.m_eq,
                move |x: &Vector| p1.cost(&to_orig(x)),
                move |x: &Vector| {
                    let g = p2.cost_gradient(&to_orig(x));
                    Vector::from_fn(g.len(), |k, _| g[perm2[k]])
                },
                move |x: &Vector| p3.constraints(&to_orig(x)),
                move |x: &Vector| {
                    let j = p4.constraint_jacobian(&to_orig(x));
                    Matrix::from_fn(j.nrows(), j.ncols(), |r, c| j[(r, perm3[c])])
                },
                move |x: &Vector, l: &Vector| {
                    let h = p5.lagrangian_hessian(&to_orig(x), l);
                    Matrix::from_fn(h.nrows(), h.ncols(), |r, c| h[(perm4[r], perm4[c])])
                },
            );
            if p.sparse.is_some() {
                q.with_sparse_derivatives(sparse)
            } else {
                q
            }
        };
        Self::new(wrap(&self.players[1]), wrap(&self.players[0]))
    }
}

/// Worst relative errors of each callback against central differences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlayerDerivativeErrors {
    pub cost_gradient: f64,
    pub constraint_jacobian: f64,
    pub lagrangian_hessian: f64,
}

impl PlayerDerivativeErrors {
    pub fn max(&self) -> f64 {
        self.cost_gradient
            .max(self.constraint_jacobian)
            .max(self.lagrangian_hessian)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DerivativeReport {
    pub players: [PlayerDerivativeErrors; 2],
}

impl DerivativeReport {
    pub fn max(&self) -> f64 {
        self.players[0].max().max(self.players[1].max())
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Richardson-extrapolated central difference of `f` along coordinate `k`.
fn difference<T>(x: &Vector, k: usize, step: f64, f: impl Fn(&Vector) -> T) -> T
where
    T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T>,
{
    let central = |h: f64| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        (f(&xp) - f(&xm)) * (1.0 / (2.0 * h))
    };
    (central(step / 2.0) * 4.0 - central(step)) * (1.0 / 3.0)
}

/// Compares every analytic derivative with extrapolated central
/// differences at `x`.
///
/// The Lagrangian Hessian is checked with all multipliers set to one, so
/// every constraint's curvature contributes.
pub fn check_derivatives(game: &TwoPlayerGame, x: &Vector, step: f64) -> DerivativeReport {
    let n = game.n_total();
    let mut report = DerivativeReport::default();
    for (i, errors) in report.players.iter_mut().enumerate() {
        let p = game.player(i);
        let grad = p.cost_gradient(x);
        let jac = p.constraint_jacobian(x);
        let ones = Vector::from_element(p.m(), 1.0);
        let hess = p.lagrangian_hessian(x, &ones);
        let lag_grad = |y: &Vector| p.cost_gradient(y) - p.constraint_jacobian(y).transpose() * &ones;
        for k in 0..n {
            let dc = difference(x, k, step, |y| p.cost(y));
            errors.cost_gradient = errors.cost_gradient.max(rel_err(grad[k], dc));
            let dg = difference(x, k, step, |y| p.constraints(y));
            for r in 0..p.m() {
                errors.constraint_jacobian = errors.constraint_jacobian.max(rel_err(jac[(r, k)], dg[r]));
            }
            let dl = difference(x, k, step, lag_grad);
            for r in 0..n {
                errors.lagrangian_hessian = errors.lagrangian_hessian.max(rel_err(hess[(r, k)], dl[r]));
            }
        }
    }
    report
}
