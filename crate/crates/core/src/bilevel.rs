//! Bilevel (leader-follower) equilibria.
//!
//! The follower's stationarity set is a union of pieces, one per way of
//! satisfying each complementarity pair. A candidate point is accepted once
//! it is a local minimizer of the leader's problem restricted to every piece
//! that contains it, and the follower's block is a best response.
//!
//! Each restricted leader problem is itself solved through its KKT system.
//! Its Jacobian needs the derivative of the follower's KKT Jacobian
//! contracted with the piece multipliers; that third-order term is formed by
//! central differences of analytic second derivatives.

use thiserror::Error;

use crate::mcp::{
    self, classify_with_values, IndexClassification, Matrix, McpProblem, SolveStatus, SolverOptions, Vector,
    DEFAULT_ACTIVITY_TOL,
};
use crate::problems::{other, GameError, TwoPlayerGame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BilevelError {
    #[error("follower solve failed ({status:?}, residual {residual:e})")]
    FollowerSolveFailed { status: SolveStatus, residual: f64 },
    #[error("piece solve failed ({status:?}, residual {residual:e})")]
    PieceSolveFailed { status: SolveStatus, residual: f64 },
    #[error("{pieces} pieces exceed the cap of {cap}")]
    TooManyPieces { pieces: u128, cap: usize },
    #[error(transparent)]
    Game(#[from] GameError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilevelOptions {
    pub piece_cap: usize,
    pub max_outer_iterations: usize,
    pub act_tol: f64,
    /// Leader-cost decrease that counts as a disagreement.
    pub improve_tol: f64,
    /// Displacement that counts as a disagreement.
    pub move_tol: f64,
    /// Minimum leader-cost progress per outer iteration while pieces disagree.
    pub stall_tol: f64,
    pub fd_step: f64,
    pub mcp: SolverOptions,
}

impl Default for BilevelOptions {
    fn default() -> Self {
        Self {
            piece_cap: 256,
            max_outer_iterations: 50,
            act_tol: DEFAULT_ACTIVITY_TOL,
            improve_tol: 1e-8,
            move_tol: 1e-6,
            stall_tol: 1e-10,
            fd_step: 1e-6,
            mcp: SolverOptions::default(),
        }
    }
}

/// The follower's KKT system `F(z) ⊥ l ≤ z ≤ u` with `z = (x_f, λ_f)`,
/// viewed as a function of the joint `x` and `λ_f`.
pub struct FollowerKkt<'g> {
    game: &'g TwoPlayerGame,
    follower: usize,
}

impl<'g> FollowerKkt<'g> {
    pub fn new(game: &'g TwoPlayerGame, follower: usize) -> Self {
        Self { game, follower }
    }

    pub fn n_own(&self) -> usize {
        self.game.player(self.follower).n_own()
    }

    pub fn m(&self) -> usize {
        self.game.player(self.follower).m()
    }

    /// Number of complementarity indices, `n_f + m_f`.
    pub fn dim(&self) -> usize {
        self.n_own() + self.m()
    }

    pub fn lower(&self) -> Vector {
        let p = self.game.player(self.follower);
        Vector::from_fn(self.dim(), |j, _| {
            let k = j.wrapping_sub(self.n_own());
            if j >= self.n_own() && k < p.m_ineq() {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
    }

    pub fn upper(&self) -> Vector {
        Vector::from_element(self.dim(), f64::INFINITY)
    }

    /// Joint index of the variable that complementarity index `j` bounds:
    /// either an entry of `x` or, past `n`, an entry of `λ_f`.
    pub fn variable_of(&self, j: usize) -> usize {
        if j < self.n_own() {
            self.game.block(self.follower).start + j
        } else {
            self.game.n_total() + (j - self.n_own())
        }
    }

    pub fn z_of(&self, x: &Vector, lam: &Vector) -> Vector {
        let b = self.game.block(self.follower);
        let mut z = Vector::zeros(self.dim());
        z.rows_mut(0, b.len()).copy_from(&x.rows(b.start, b.len()));
        z.rows_mut(b.len(), lam.len()).copy_from(lam);
        z
    }

    pub fn eval(&self, x: &Vector, lam: &Vector) -> Vector {
        let p = self.game.player(self.follower);
        let b = self.game.block(self.follower);
        let grad = p.cost_gradient(x);
        let jac = p.constraint_jacobian(x);
        let mut f = Vector::zeros(self.dim());
        for (r, c) in b.enumerate() {
            f[r] = grad[c] - jac.column(c).dot(lam);
        }
        f.rows_mut(self.n_own(), self.m()).copy_from(&p.constraints(x));
        f
    }

    /// Jacobian of [`Self::eval`] with respect to `(x, λ_f)`.
    pub fn jacobian(&self, x: &Vector, lam: &Vector) -> Matrix {
        let p = self.game.player(self.follower);
        let b = self.game.block(self.follower);
        let n = self.game.n_total();
        let nf = self.n_own();
        let d = p.sparse_derivatives(x, lam);
        let mut out = Matrix::zeros(self.dim(), n + self.m());
        for &(r, c, v) in &d.hessian {
            if b.contains(&r) {
                out[(r - b.start, c)] += v;
            }
        }
        for &(k, c, v) in &d.jacobian {
            out[(nf + k, c)] += v;
            if b.contains(&c) {
                out[(c - b.start, n + k)] -= v;
            }
        }
        out
    }

    /// `Jᵀ a` for the Jacobian of [`Self::eval`], without forming it.
    pub fn weighted_gradient(&self, x: &Vector, lam: &Vector, a: &Vector) -> Vector {
        let p = self.game.player(self.follower);
        let b = self.game.block(self.follower);
        let n = self.game.n_total();
        let d = p.sparse_derivatives(x, lam);
        let nf = self.n_own();
        let stat = a.rows(0, nf);
        let cons = a.rows(nf, self.m());
        let mut out = Vector::zeros(n + self.m());
        for &(r, c, v) in &d.hessian {
            if b.contains(&r) {
                out[c] += v * stat[r - b.start];
            }
        }
        for &(k, c, v) in &d.jacobian {
            out[c] += v * cons[k];
            if b.contains(&c) {
                out[n + k] -= v * stat[c - b.start];
            }
        }
        out
    }

    /// Complementarity problem over `(x_f, λ_f)` with the other block of `x` frozen.
    pub fn best_response_mcp(&self, x: &Vector) -> McpProblem<'g> {
        let game = self.game;
        let follower = self.follower;
        let frozen = x.clone();
        let frozen2 = x.clone();
        let b = game.block(follower);
        let nf = b.len();
        let split = move |base: &Vector, z: &Vector| {
            let mut xx = base.clone();
            xx.rows_mut(b.start, nf).copy_from(&z.rows(0, nf));
            let lam = z.rows(nf, z.len() - nf).into_owned();
            (xx, lam)
        };
        let split2 = split;
        McpProblem::new(
            self.lower(),
            self.upper(),
            move |z: &Vector| {
                let (xx, lam) = split(&frozen, z);
                FollowerKkt::new(game, follower).eval(&xx, &lam)
            },
            move |z: &Vector| {
                let (xx, lam) = split2(&frozen2, z);
                let kkt = FollowerKkt::new(game, follower);
                let full = kkt.jacobian(&xx, &lam);
                let bb = game.block(follower);
                let n = game.n_total();
                let d = kkt.dim();
                let mut out = Matrix::zeros(d, d);
                for r in 0..d {
                    for (c, col) in bb.clone().enumerate() {
                        out[(r, c)] = full[(r, col)];
                    }
                    for k in 0..kkt.m() {
                        out[(r, nf + k)] = full[(r, n + k)];
                    }
                }
                out
            },
        )
        .expect("follower bounds are ordered")
    }
}

/// A best response of one player with the other's block held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerSolution {
    /// Joint vector with the responding player's block updated.
    pub x: Vector,
    pub duals: Vector,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves player `responder`'s KKT system with the other block of `x` fixed,
/// starting from the responder's block of `x` and `duals0` (zeros if absent).
pub fn solve_best_response(
    game: &TwoPlayerGame,
    responder: usize,
    x: &Vector,
    duals0: Option<&Vector>,
    opts: &SolverOptions,
) -> Result<FollowerSolution, BilevelError> {
    game.check_x(x)?;
    let kkt = FollowerKkt::new(game, responder);
    let lam0 = match duals0 {
        Some(d) if d.len() == kkt.m() => d.clone(),
        Some(d) => {
            return Err(GameError::DimensionMismatch {
                expected: kkt.m(),
                got: d.len(),
            }
            .into())
        }
        None => Vector::zeros(kkt.m()),
    };
    let problem = kkt.best_response_mcp(x);
    let z0 = kkt.z_of(x, &lam0);
    let sol = mcp::solve_mcp(&problem, &z0, opts).expect("start has the problem dimension");
    if !sol.converged() {
        return Err(BilevelError::FollowerSolveFailed {
            status: sol.status,
            residual: sol.residual_inf,
        });
    }
    let b = game.block(responder);
    let mut xx = x.clone();
    xx.rows_mut(b.start, b.len()).copy_from(&sol.z.rows(0, b.len()));
    Ok(FollowerSolution {
        x: xx,
        duals: sol.z.rows(b.len(), kkt.m()).into_owned(),
        residual: sol.residual_inf,
        iterations: sol.iterations,
    })
}

/// Follower best response against the leader block contained in `x`.
pub fn solve_follower(
    game: &TwoPlayerGame,
    follower: usize,
    x: &Vector,
    duals0: Option<&Vector>,
    opts: &SolverOptions,
) -> Result<FollowerSolution, BilevelError> {
    solve_best_response(game, follower, x, duals0, opts)
}

/// One branch of the follower's complementarity conditions.
///
/// * `j1`: `F_j = 0` with `l_j ≤ z_j ≤ u_j`
/// * `j2`: `F_j ≥ 0` with `z_j = l_j`
/// * `j3`: `F_j ≤ 0` with `z_j = u_j`
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PieceSpec {
    pub j1: Vec<usize>,
    pub j2: Vec<usize>,
    pub j3: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Membership {
    Equal,
    AtLower,
    AtUpper,
}

impl PieceSpec {
    pub fn len(&self) -> usize {
        self.j1.len() + self.j2.len() + self.j3.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn memberships(&self, dim: usize) -> Vec<Membership> {
        let mut out = vec![Membership::Equal; dim];
        for &j in &self.j2 {
            out[j] = Membership::AtLower;
        }
        for &j in &self.j3 {
            out[j] = Membership::AtUpper;
        }
        out
    }
}

/// Every piece that contains the classified point, in canonical order:
/// degenerate indices ascending, `J1` before `J2`/`J3` for each.
pub fn enumerate_pieces(classification: &IndexClassification, cap: usize) -> Result<Vec<PieceSpec>, BilevelError> {
    let d = classification.degenerate.len();
    let count: u128 = if d >= 127 { u128::MAX } else { 1u128 << d };
    if count > cap as u128 {
        return Err(BilevelError::TooManyPieces { pieces: count, cap });
    }
    let mut degenerate = classification.degenerate.clone();
    degenerate.sort_by_key(|x| x.index);
    let mut pieces = Vec::with_capacity(count as usize);
    for mask in 0..count as usize {
        let mut piece = PieceSpec {
            j1: classification.interior.clone(),
            j2: classification.at_lower.clone(),
            j3: classification.at_upper.clone(),
        };
        for (bit, deg) in degenerate.iter().enumerate() {
            let branch = (mask >> (d - 1 - bit)) & 1;
            match (branch, deg.side) {
                (0, _) => piece.j1.push(deg.index),
                (_, mcp::BoundSide::Lower) => piece.j2.push(deg.index),
                (_, mcp::BoundSide::Upper) => piece.j3.push(deg.index),
            }
        }
        piece.j1.sort_unstable();
        piece.j2.sort_unstable();
        piece.j3.sort_unstable();
        pieces.push(piece);
    }
    Ok(pieces)
}

/// How far a restricted solve moved away from its start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub movement: f64,
    /// Start cost minus returned cost.
    pub improvement: f64,
}

impl Agreement {
    pub fn agrees(&self, move_tol: f64, improve_tol: f64) -> bool {
        self.movement <= move_tol && self.improvement <= improve_tol
    }
}

/// Verdict of each piece solve, in order. A point is a local optimum over
/// the union of closed pieces exactly when every containing piece agrees.
pub fn piece_verdicts<P, E>(
    pieces: &[P],
    mut solve: impl FnMut(&P) -> Result<Agreement, E>,
    move_tol: f64,
    improve_tol: f64,
) -> Result<Vec<bool>, E> {
    pieces
        .iter()
        .map(|p| solve(p).map(|a| a.agrees(move_tol, improve_tol)))
        .collect()
}

/// Output of a restricted leader solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecePoint {
    pub x: Vector,
    pub follower_duals: Vector,
    pub leader_duals: Vector,
    pub leader_cost: f64,
    pub is_local_min: bool,
    pub agreement: Agreement,
}

struct PieceNlp<'g> {
    game: &'g TwoPlayerGame,
    leader: usize,
    kkt: FollowerKkt<'g>,
    /// `+1` for `J1`/`J2` rows, `-1` for `J3` rows.
    signs: Vector,
    fd_step: f64,
}

impl<'g> PieceNlp<'g> {
    fn n(&self) -> usize {
        self.game.n_total()
    }
    fn n_w(&self) -> usize {
        self.n() + self.kkt.m()
    }
    fn m_leader(&self) -> usize {
        self.game.player(self.leader).m()
    }
    fn dim(&self) -> usize {
        self.n_w() + self.m_leader() + self.kkt.dim()
    }

    fn split(&self, v: &Vector) -> (Vector, Vector, Vector, Vector) {
        let n = self.n();
        let mf = self.kkt.m();
        let ml = self.m_leader();
        (
            v.rows(0, n).into_owned(),
            v.rows(n, mf).into_owned(),
            v.rows(n + mf, ml).into_owned(),
            v.rows(n + mf + ml, self.kkt.dim()).into_owned(),
        )
    }

    fn bounds(&self, piece: &PieceSpec) -> (Vector, Vector) {
        let dim = self.dim();
        let mut lower = Vector::from_element(dim, f64::NEG_INFINITY);
        let mut upper = Vector::from_element(dim, f64::INFINITY);
        let kl = self.kkt.lower();
        let ku = self.kkt.upper();
        for (j, m) in piece.memberships(self.kkt.dim()).into_iter().enumerate() {
            let var = self.kkt.variable_of(j);
            let mu = self.n_w() + self.m_leader() + j;
            match m {
                Membership::Equal => {
                    lower[var] = kl[j];
                    upper[var] = ku[j];
                }
                Membership::AtLower => {
                    lower[var] = kl[j];
                    upper[var] = kl[j];
                    lower[mu] = 0.0;
                }
                Membership::AtUpper => {
                    lower[var] = ku[j];
                    upper[var] = ku[j];
                    lower[mu] = 0.0;
                }
            }
        }
        let p = self.game.player(self.leader);
        for k in 0..p.m_ineq() {
            lower[self.n_w() + k] = 0.0;
        }
        (lower, upper)
    }

    fn eval(&self, v: &Vector) -> Vector {
        let (x, lam, mu_l, mu_p) = self.split(v);
        let n = self.n();
        let p = self.game.player(self.leader);
        let weights = mu_p.component_mul(&self.signs);
        let phi = self.kkt.weighted_gradient(&x, &lam, &weights);
        let grad_x = p.cost_gradient(&x) - p.constraint_jacobian(&x).transpose() * &mu_l;
        let mut f = Vector::zeros(self.dim());
        for c in 0..n {
            f[c] = grad_x[c] - phi[c];
        }
        for k in 0..self.kkt.m() {
            f[n + k] = -phi[n + k];
        }
        f.rows_mut(self.n_w(), self.m_leader()).copy_from(&p.constraints(&x));
        let kv = self.kkt.eval(&x, &lam).component_mul(&self.signs);
        f.rows_mut(self.n_w() + self.m_leader(), self.kkt.dim()).copy_from(&kv);
        f
    }

    fn jacobian(&self, v: &Vector) -> Matrix {
        let (x, lam, mu_l, mu_p) = self.split(v);
        let n = self.n();
        let nw = self.n_w();
        let ml = self.m_leader();
        let p = self.game.player(self.leader);
        let weights = mu_p.component_mul(&self.signs);
        let mut jm = Matrix::zeros(self.dim(), self.dim());

        let hl = p.lagrangian_hessian(&x, &mu_l);
        for r in 0..n {
            for c in 0..n {
                jm[(r, c)] = hl[(r, c)];
            }
        }
        // third-order term: derivative of Jᵀ(s∘μ) in the x directions
        for k in 0..n {
            let h = self.fd_step * x[k].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let d = (self.kkt.weighted_gradient(&xp, &lam, &weights)
                - self.kkt.weighted_gradient(&xm, &lam, &weights))
                / (2.0 * h);
            for r in 0..n {
                jm[(r, k)] -= d[r];
            }
            for q in 0..self.kkt.m() {
                jm[(n + q, k)] -= d[n + q];
                jm[(k, n + q)] -= d[n + q];
            }
        }
        let jl = p.constraint_jacobian(&x);
        for q in 0..ml {
            for c in 0..n {
                jm[(c, nw + q)] = -jl[(q, c)];
                jm[(nw + q, c)] = jl[(q, c)];
            }
        }
        let jp = self.kkt.jacobian(&x, &lam);
        for j in 0..self.kkt.dim() {
            let s = self.signs[j];
            let row = nw + ml + j;
            for c in 0..nw {
                let val = s * jp[(j, c)];
                jm[(row, c)] = val;
                jm[(c, row)] = -val;
            }
        }
        jm
    }
}

fn movement(x0: &Vector, lam0: &Vector, x1: &Vector, lam1: &Vector) -> f64 {
    let dx = (x1 - x0).amax();
    let dl = if lam0.is_empty() {
        0.0
    } else {
        (lam1 - lam0).amax() / lam0.amax().max(1.0)
    };
    dx.max(dl)
}

/// Minimizes the leader's cost over `x ∈ C_leader` and `(x, λ_f)` in one
/// follower piece, warm-started at `start`.
pub fn solve_piece_nlp(
    game: &TwoPlayerGame,
    leader: usize,
    piece: &PieceSpec,
    start: (&Vector, &Vector),
    leader_duals0: Option<&Vector>,
    opts: &BilevelOptions,
) -> Result<PiecePoint, BilevelError> {
    let (x0, lam0) = start;
    game.check_x(x0)?;
    let kkt = FollowerKkt::new(game, other(leader));
    if lam0.len() != kkt.m() {
        return Err(GameError::DimensionMismatch {
            expected: kkt.m(),
            got: lam0.len(),
        }
        .into());
    }
    let mut signs = Vector::from_element(kkt.dim(), 1.0);
    for &j in &piece.j3 {
        signs[j] = -1.0;
    }
    let nlp = PieceNlp {
        game,
        leader,
        kkt,
        signs,
        fd_step: opts.fd_step,
    };
    let (lower, upper) = nlp.bounds(piece);
    let problem = McpProblem::new(lower, upper, |v: &Vector| nlp.eval(v), |v: &Vector| nlp.jacobian(v))
        .expect("piece bounds are ordered");

    let n = game.n_total();
    let mf = nlp.kkt.m();
    let ml = nlp.m_leader();
    let mut v0 = Vector::zeros(nlp.dim());
    v0.rows_mut(0, n).copy_from(x0);
    v0.rows_mut(n, mf).copy_from(lam0);
    if let Some(d) = leader_duals0 {
        if d.len() == ml {
            v0.rows_mut(n + mf, ml).copy_from(d);
        }
    }
    let sol = mcp::solve_mcp(&problem, &v0, &opts.mcp).expect("start has the problem dimension");
    if !sol.converged() {
        return Err(BilevelError::PieceSolveFailed {
            status: sol.status,
            residual: sol.residual_inf,
        });
    }
    let (x, lam, mu_l, _) = nlp.split(&sol.z);
    let p = game.player(leader);
    let start_cost = p.cost(x0);
    let leader_cost = p.cost(&x);
    let agreement = Agreement {
        movement: movement(x0, lam0, &x, &lam),
        improvement: start_cost - leader_cost,
    };
    Ok(PiecePoint {
        x,
        follower_duals: lam,
        leader_duals: mu_l,
        leader_cost,
        is_local_min: agreement.movement <= opts.move_tol,
        agreement,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum BilevelStatus {
    Equilibrium,
    MaxOuterIterations,
    PieceSolveFailed,
    FollowerSolveFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilevelResult {
    pub x: Vector,
    pub follower_duals: Vector,
    pub leader_duals: Vector,
    pub pieces_checked: usize,
    pub outer_iterations: usize,
    pub status: BilevelStatus,
    pub leader_cost: f64,
}

impl BilevelResult {
    pub fn is_equilibrium(&self) -> bool {
        self.status == BilevelStatus::Equilibrium
    }
}

/// Alternates follower best responses with restricted leader solves until
/// every piece containing the incumbent agrees with it.
pub fn solve_bilevel(
    game: &TwoPlayerGame,
    leader: usize,
    x0: &Vector,
    follower_duals0: Option<&Vector>,
    opts: &BilevelOptions,
) -> Result<BilevelResult, BilevelError> {
    game.check_x(x0)?;
    let follower = other(leader);
    let kkt = FollowerKkt::new(game, follower);
    let mut x = x0.clone();
    let mut lam = match follower_duals0 {
        Some(d) if d.len() == kkt.m() => d.clone(),
        _ => Vector::zeros(kkt.m()),
    };
    let mut leader_duals = Vector::zeros(game.player(leader).m());
    let mut pieces_checked = 0;
    let mut costs: Vec<f64> = Vec::new();

    let finish = |x: Vector, lam: Vector, mu: Vector, checked, outer, status| BilevelResult {
        leader_cost: game.player(leader).cost(&x),
        x,
        follower_duals: lam,
        leader_duals: mu,
        pieces_checked: checked,
        outer_iterations: outer,
        status,
    };

    for outer in 1..=opts.max_outer_iterations {
        let fs = match solve_follower(game, follower, &x, Some(&lam), &opts.mcp) {
            Ok(fs) => fs,
            Err(_) => {
                return Ok(finish(x, lam, leader_duals, pieces_checked, outer, BilevelStatus::FollowerSolveFailed))
            }
        };
        x = fs.x;
        lam = fs.duals;
        let z = kkt.z_of(&x, &lam);
        let fz = kkt.eval(&x, &lam);
        let classification = match classify_with_values(&kkt.lower(), &kkt.upper(), &z, &fz, opts.act_tol) {
            Ok(c) => c,
            Err(_) => {
                return Ok(finish(x, lam, leader_duals, pieces_checked, outer, BilevelStatus::FollowerSolveFailed))
            }
        };
        let pieces = match enumerate_pieces(&classification, opts.piece_cap) {
            Ok(p) => p,
            Err(_) => {
                return Ok(finish(x, lam, leader_duals, pieces_checked, outer, BilevelStatus::PieceSolveFailed))
            }
        };
        let mut all_agree = true;
        for piece in &pieces {
            pieces_checked += 1;
            let pt = match solve_piece_nlp(game, leader, piece, (&x, &lam), Some(&leader_duals), opts) {
                Ok(pt) => pt,
                Err(_) => {
                    return Ok(finish(x, lam, leader_duals, pieces_checked, outer, BilevelStatus::PieceSolveFailed))
                }
            };
            if pt.agreement.agrees(opts.move_tol, opts.improve_tol) {
                leader_duals = pt.leader_duals;
                continue;
            }
            all_agree = false;
            x = pt.x;
            lam = pt.follower_duals;
            leader_duals = pt.leader_duals;
            break;
        }
        if all_agree {
            return Ok(finish(x, lam, leader_duals, pieces_checked, outer, BilevelStatus::Equilibrium));
        }
        costs.push(game.player(leader).cost(&x));
        let k = costs.len();
        if k >= 3 && costs[k - 3] - costs[k - 2] <= opts.stall_tol && costs[k - 2] - costs[k - 1] <= opts.stall_tol {
            return Ok(finish(x, lam, leader_duals, pieces_checked, outer, BilevelStatus::MaxOuterIterations));
        }
    }
    Ok(finish(
        x,
        lam,
        leader_duals,
        pieces_checked,
        opts.max_outer_iterations,
        BilevelStatus::MaxOuterIterations,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcp::{BoundSide, DegenerateIndex};
    use crate::nash::solve_nash;
    use crate::problems::PlayerProblem;

    /// Leader `(x_1 - 1)^2 + x_2^2`, follower `(x_2 - x_1)^2`.
    fn stackelberg_toy() -> TwoPlayerGame {
        let leader = PlayerProblem::unconstrained(
            1,
            |x: &Vector| (x[0] - 1.0).powi(2) + x[1].powi(2),
            |x: &Vector| Vector::from_vec(vec![2.0 * (x[0] - 1.0), 2.0 * x[1]]),
            |_x: &Vector| Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]),
        );
        let follower = PlayerProblem::unconstrained(
            1,
            |x: &Vector| (x[1] - x[0]).powi(2),
            |x: &Vector| Vector::from_vec(vec![-2.0 * (x[1] - x[0]), 2.0 * (x[1] - x[0])]),
            |_x: &Vector| Matrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]),
        );
        TwoPlayerGame::new(leader, follower)
    }

    /// Follower minimizes `x_2^2` subject to `x_2 ≥ 1`.
    fn bounded_follower() -> TwoPlayerGame {
        let leader = PlayerProblem::unconstrained(
            1,
            |x: &Vector| x[0].powi(2),
            |x: &Vector| Vector::from_vec(vec![2.0 * x[0], 0.0]),
            |_x: &Vector| Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]),
        );
        let follower = PlayerProblem::new(
            1,
            1,
            0,
            |x: &Vector| x[1].powi(2),
            |x: &Vector| Vector::from_vec(vec![0.0, 2.0 * x[1]]),
            |x: &Vector| Vector::from_element(1, x[1] - 1.0),
            |_x: &Vector| Matrix::from_row_slice(1, 2, &[0.0, 1.0]),
            |_x: &Vector, _l: &Vector| Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]),
        );
        TwoPlayerGame::new(leader, follower)
    }

    #[test]
    fn follower_exact_best_response() {
        let g = stackelberg_toy();
        let s = solve_follower(&g, 1, &Vector::from_vec(vec![0.7, 0.0]), None, &SolverOptions::default()).unwrap();
        assert!((s.x[1] - 0.7).abs() < 1e-12);
        assert_eq!(s.duals.len(), 0);
        assert_eq!(s.x[0], 0.7);
    }

    #[test]
    fn follower_bound_multiplier() {
        let g = bounded_follower();
        let s = solve_follower(&g, 1, &Vector::from_vec(vec![0.0, 3.0]), None, &SolverOptions::default()).unwrap();
        assert!((s.x[1] - 1.0).abs() < 1e-12);
        assert!((s.duals[0] - 2.0).abs() < 1e-10);
    }

    fn classification_with(degenerate: Vec<DegenerateIndex>) -> IndexClassification {
        IndexClassification {
            interior: vec![0],
            at_lower: vec![],
            at_upper: vec![],
            degenerate,
        }
    }

    #[test]
    fn no_degeneracy_single_piece() {
        let pieces = enumerate_pieces(&classification_with(vec![]), 256).unwrap();
        assert_eq!(pieces.len(), 1);
        assert_eq!(pieces[0].j1, vec![0]);
    }

    #[test]
    fn two_degenerate_lower_four_pieces() {
        let deg = vec![
            DegenerateIndex { index: 2, side: BoundSide::Lower },
            DegenerateIndex { index: 1, side: BoundSide::Lower },
        ];
        let pieces = enumerate_pieces(&classification_with(deg), 256).unwrap();
        assert_eq!(pieces.len(), 4);
        let expected = [
            (vec![0, 1, 2], vec![]),
            (vec![0, 1], vec![2]),
            (vec![0, 2], vec![1]),
            (vec![0], vec![1, 2]),
        ];
        for (p, (j1, j2)) in pieces.iter().zip(expected) {
            assert_eq!(p.j1, j1);
            assert_eq!(p.j2, j2);
            assert!(p.j3.is_empty());
        }
    }

    #[test]
    fn upper_degenerate_branches_into_j3() {
        let deg = vec![DegenerateIndex { index: 3, side: BoundSide::Upper }];
        let pieces = enumerate_pieces(&classification_with(deg), 256).unwrap();
        assert_eq!(pieces[1].j3, vec![3]);
    }

    #[test]
    fn too_many_pieces() {
        let deg = (0..10)
            .map(|index| DegenerateIndex { index, side: BoundSide::Lower })
            .collect();
        let err = enumerate_pieces(&classification_with(deg), 256).unwrap_err();
        assert_eq!(err, BilevelError::TooManyPieces { pieces: 1024, cap: 256 });
    }

    #[test]
    fn piece_nlp_substitution() {
        let g = stackelberg_toy();
        let piece = PieceSpec {
            j1: vec![0],
            ..Default::default()
        };
        let x0 = Vector::from_vec(vec![0.0, 0.0]);
        let pt = solve_piece_nlp(&g, 0, &piece, (&x0, &Vector::zeros(0)), None, &BilevelOptions::default()).unwrap();
        assert!((pt.x[0] - 0.5).abs() < 1e-8);
        assert!((pt.x[1] - 0.5).abs() < 1e-8);
        assert!(!pt.is_local_min);

        let again = solve_piece_nlp(&g, 0, &piece, (&pt.x, &pt.follower_duals), None, &BilevelOptions::default())
            .unwrap();
        assert!(again.is_local_min);
        assert!((&again.x - &pt.x).amax() <= 1e-6);
    }

    #[test]
    fn piece_keeps_bound_fixed() {
        // Follower minimizes (x_2 - 2)^2 subject to x_2 >= 1; the bound is slack.
        let leader = PlayerProblem::unconstrained(
            1,
            |x: &Vector| x[0].powi(2) + x[1],
            |x: &Vector| Vector::from_vec(vec![2.0 * x[0], 1.0]),
            |_x: &Vector| Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]),
        );
        let follower = PlayerProblem::new(
            1,
            1,
            0,
            |x: &Vector| (x[1] - 2.0).powi(2),
            |x: &Vector| Vector::from_vec(vec![0.0, 2.0 * (x[1] - 2.0)]),
            |x: &Vector| Vector::from_element(1, x[1] - 1.0),
            |_x: &Vector| Matrix::from_row_slice(1, 2, &[0.0, 1.0]),
            |_x: &Vector, _l: &Vector| Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]),
        );
        let g = TwoPlayerGame::new(leader, follower);
        let piece = PieceSpec {
            j1: vec![0],
            j2: vec![1],
            j3: vec![],
        };
        let x = Vector::from_vec(vec![0.4, 1.7]);
        let pt = solve_piece_nlp(&g, 0, &piece, (&x, &Vector::from_element(1, 0.3)), None, &BilevelOptions::default())
            .unwrap();
        assert_eq!(pt.follower_duals[0], 0.0);
        assert!((pt.x[1] - 2.0).abs() < 1e-10);
        assert!(pt.x[0].abs() < 1e-10);
    }

    #[test]
    fn stackelberg_toy_solution() {
        let g = stackelberg_toy();
        let r = solve_bilevel(&g, 0, &Vector::zeros(2), None, &BilevelOptions::default()).unwrap();
        assert_eq!(r.status, BilevelStatus::Equilibrium);
        assert!((r.x[0] - 0.5).abs() <= 1e-6);
        assert!((r.x[1] - 0.5).abs() <= 1e-6);
        assert!((r.leader_cost - 0.5).abs() <= 1e-6);
    }

    #[test]
    fn decoupled_bilevel_matches_nash() {
        let p = |k: usize, target: f64| {
            PlayerProblem::unconstrained(
                1,
                move |x: &Vector| (x[k] - target).powi(2),
                move |x: &Vector| {
                    let mut g = Vector::zeros(2);
                    g[k] = 2.0 * (x[k] - target);
                    g
                },
                move |_x: &Vector| {
                    let mut h = Matrix::zeros(2, 2);
                    h[(k, k)] = 2.0;
                    h
                },
            )
        };
        let g = TwoPlayerGame::new(p(0, 1.5), p(1, -0.25));
        let nash = solve_nash(&g, &Vector::zeros(2), None, &SolverOptions::default()).unwrap();
        let bil = solve_bilevel(&g, 0, &Vector::zeros(2), None, &BilevelOptions::default()).unwrap();
        assert!(bil.is_equilibrium());
        assert!((&bil.x - &nash.x).amax() <= 1e-8);
    }

    #[test]
    fn bilevel_is_deterministic() {
        let g = stackelberg_toy();
        let a = solve_bilevel(&g, 0, &Vector::from_vec(vec![0.3, -0.2]), None, &BilevelOptions::default()).unwrap();
        let b = solve_bilevel(&g, 0, &Vector::from_vec(vec![0.3, -0.2]), None, &BilevelOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
