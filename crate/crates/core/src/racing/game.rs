//! Receding-horizon racing game over `n_T` steps.
//!
//! Player block layout: states `y_1..y_nT` as `(lat, long, v, θ)`, then
//! controls `u_1..u_nT` as `(τ, ω)`. Per step `t` the constraints are ten
//! inequalities (collision, two track edges, `v ≥ 0`, two heading bounds,
//! four control bounds) followed, after all inequalities, by four dynamics
//! equalities (`v`, `θ`, `lat`, `long`).

use std::f64::consts::FRAC_PI_2;

use std::sync::Mutex;

use thiserror::Error;

use super::dynamics::{Control, CraftState};
use super::interaction::{draft_gate, responsibility_p1};
use super::params::RaceParams;
use super::track::{Arc, TrackError, TrackLayout};
use crate::mcp::{Matrix, Vector};
use crate::problems::{PlayerProblem, SparseDerivatives, TwoPlayerGame};

pub const INEQ_PER_STEP: usize = 10;
pub const EQ_PER_STEP: usize = 4;

const LAT: usize = 0;
const LONG: usize = 1;
const VEL: usize = 2;
const HEAD: usize = 3;
const TAU: usize = 0;
const OMEGA: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error("infeasible start: {0}")]
    InfeasibleStart(String),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("invalid parameters: {0}")]
    Params(String),
}

/// Everything fixed over one horizon: current states and fitted arcs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: RaceParams,
    pub states: [CraftState; 2],
    pub arcs: [Arc; 2],
}

impl Scenario {
    /// Fit each player's arc at its current position.
    pub fn new(track: &TrackLayout, states: [CraftState; 2], params: &RaceParams) -> Result<Self, BuildError> {
        let arcs = [track.fit_arc(states[0].position())?, track.fit_arc(states[1].position())?];
        Ok(Self { params: params.clone(), states, arcs })
    }

    /// Same scenario with the player labels exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            params: self.params.clone(),
            states: [self.states[1], self.states[0]],
            arcs: [self.arcs[1], self.arcs[0]],
        }
    }

    /// Checks the current states against the bare collision radius and the
    /// track edges.
    pub fn check_start(&self) -> Result<(), BuildError> {
        for (i, s) in self.states.iter().enumerate() {
            if !s.is_finite() {
                return Err(BuildError::InfeasibleStart(format!("player {} state is not finite", i + 1)));
            }
            if !self.arcs[i].contains(s.position(), self.params.w_track) {
                return Err(BuildError::InfeasibleStart(format!("player {} is off the track", i + 1)));
            }
        }
        let [p, q] = [self.states[0].position(), self.states[1].position()];
        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        if d < self.params.r_col {
            return Err(BuildError::InfeasibleStart(format!("players are {d:.3} m apart")));
        }
        Ok(())
    }
}

pub fn state_var(n_t: usize, t: usize, comp: usize) -> usize {
    debug_assert!(t >= 1 && t <= n_t);
    4 * (t - 1) + comp
}

pub fn control_var(n_t: usize, t: usize, comp: usize) -> usize {
    debug_assert!(t >= 1 && t <= n_t);
    4 * n_t + 2 * (t - 1) + comp
}

pub fn encode_block(states: &[CraftState], controls: &[Control]) -> Vector {
    let n_t = states.len();
    assert_eq!(controls.len(), n_t);
    let mut v = Vector::zeros(6 * n_t);
    for t in 1..=n_t {
        let s = states[t - 1].as_array();
        for c in 0..4 {
            v[state_var(n_t, t, c)] = s[c];
        }
        v[control_var(n_t, t, TAU)] = controls[t - 1].tau;
        v[control_var(n_t, t, OMEGA)] = controls[t - 1].omega;
    }
    v
}

pub fn decode_block(block: &Vector, n_t: usize) -> (Vec<CraftState>, Vec<Control>) {
    assert_eq!(block.len(), 6 * n_t);
    let states = (1..=n_t).map(|t| CraftState::from_slice(&block.as_slice()[state_var(n_t, t, 0)..][..4])).collect();
    let controls = (1..=n_t)
        .map(|t| Control::new(block[control_var(n_t, t, TAU)], block[control_var(n_t, t, OMEGA)]))
        .collect();
    (states, controls)
}

/// Drop the first step of a player block and repeat the last.
pub fn shift_block(block: &Vector, n_t: usize) -> Vector {
    let (mut states, mut controls) = decode_block(block, n_t);
    states.rotate_left(1);
    controls.rotate_left(1);
    states[n_t - 1] = states[n_t.saturating_sub(2)];
    controls[n_t - 1] = controls[n_t.saturating_sub(2)];
    encode_block(&states, &controls)
}

/// Shift a player's multipliers by one step, matching [`shift_block`].
pub fn shift_duals(duals: &Vector, n_t: usize) -> Vector {
    assert_eq!(duals.len(), (INEQ_PER_STEP + EQ_PER_STEP) * n_t);
    let mut out = duals.clone();
    for (start, per) in [(0, INEQ_PER_STEP), (INEQ_PER_STEP * n_t, EQ_PER_STEP)] {
        for t in 0..n_t {
            let src = (t + 1).min(n_t - 1);
            for k in 0..per {
                out[start + per * t + k] = duals[start + per * src + k];
            }
        }
    }
    out
}

/// A variable of the joint vector, or a constant from the current state.
#[derive(Clone, Copy)]
struct Sym {
    idx: Option<usize>,
    val: f64,
}

/// Value, sparse gradient and sparse Hessian of one scalar function.
#[derive(Default)]
struct Row {
    value: f64,
    grad: Vec<(usize, f64)>,
    hess: Vec<(usize, usize, f64)>,
}

impl Row {
    /// Scatter a dense local derivative (`hess` row-major `k × k`).
    fn local(value: f64, syms: &[Sym], grad: &[f64], hess: &[f64]) -> Row {
        let k = syms.len();
        let mut row = Row { value, ..Row::default() };
        for a in 0..k {
            let Some(ia) = syms[a].idx else { continue };
            if grad[a] != 0.0 {
                row.grad.push((ia, grad[a]));
            }
            for b in 0..k {
                let Some(ib) = syms[b].idx else { continue };
                let h = hess[a * k + b];
                if h != 0.0 {
                    row.hess.push((ia, ib, h));
                }
            }
        }
        row
    }
}

struct View<'a> {
    sc: &'a Scenario,
    x: &'a Vector,
}

impl View<'_> {
    fn n_t(&self) -> usize {
        self.sc.params.n_t
    }

    fn state(&self, p: usize, t: usize, c: usize) -> Sym {
        if t == 0 {
            return Sym { idx: None, val: self.sc.states[p].as_array()[c] };
        }
        let idx = p * 6 * self.n_t() + state_var(self.n_t(), t, c);
        Sym { idx: Some(idx), val: self.x[idx] }
    }

    fn control(&self, p: usize, t: usize, c: usize) -> Sym {
        let idx = p * 6 * self.n_t() + control_var(self.n_t(), t, c);
        Sym { idx: Some(idx), val: self.x[idx] }
    }

    fn stage_cost(&self, i: usize, t: usize) -> Row {
        let pr = &self.sc.params;
        let o = 1 - i;
        let arc = &self.sc.arcs[i];
        let syms = [
            self.state(i, t, LAT),
            self.state(i, t, LONG),
            self.state(i, t, VEL),
            self.state(i, t, HEAD),
            self.control(i, t, TAU),
            self.control(i, t, OMEGA),
            self.state(o, t, VEL),
            self.state(o, t, HEAD),
        ];
        let [lat, long, v, th, tau, om, vo, tho] = syms.map(|s| s.val);
        let ex = lat - arc.center_lat;
        let ey = long - arc.center_long;
        let dev = ex * ex + ey * ey - arc.radius * arc.radius;
        let a2 = pr.alpha1 * pr.alpha1;
        let (s, c) = th.sin_cos();
        let (so, co) = tho.sin_cos();
        let value = a2 * dev * dev + pr.alpha2 * (tau * tau + om * om) + pr.beta * (vo * co - v * c);

        let mut g = [0.0; 8];
        g[0] = 4.0 * a2 * dev * ex;
        g[1] = 4.0 * a2 * dev * ey;
        g[2] = -pr.beta * c;
        g[3] = pr.beta * v * s;
        g[4] = 2.0 * pr.alpha2 * tau;
        g[5] = 2.0 * pr.alpha2 * om;
        g[6] = pr.beta * co;
        g[7] = -pr.beta * vo * so;

        let mut h = [0.0; 64];
        let e = [ex, ey];
        for a in 0..2 {
            for b in 0..2 {
                let delta = if a == b { 1.0 } else { 0.0 };
                h[a * 8 + b] = a2 * (8.0 * e[a] * e[b] + 4.0 * dev * delta);
            }
        }
        h[2 * 8 + 3] = pr.beta * s;
        h[3 * 8 + 2] = pr.beta * s;
        h[3 * 8 + 3] = pr.beta * v * c;
        h[4 * 8 + 4] = 2.0 * pr.alpha2;
        h[5 * 8 + 5] = 2.0 * pr.alpha2;
        h[6 * 8 + 7] = -pr.beta * so;
        h[7 * 8 + 6] = -pr.beta * so;
        h[7 * 8 + 7] = -pr.beta * vo * co;
        Row::local(value, &syms, &g, &h)
    }

    fn collision(&self, i: usize, t: usize) -> Row {
        let pr = &self.sc.params;
        let o = 1 - i;
        let syms = [self.state(i, t, LAT), self.state(i, t, LONG), self.state(o, t, LAT), self.state(o, t, LONG)];
        let [lat, long, lato, longo] = syms.map(|s| s.val);
        let (dx, dy) = (lat - lato, long - longo);
        let r = pr.planning_radius();
        let (ell, d1, d2) = responsibility_p1(longo - long, pr);
        let value = dx * dx + dy * dy - r * r - ell;
        let g = [2.0 * dx, 2.0 * dy + d1, -2.0 * dx, -2.0 * dy - d1];
        let dh = [0.0, -1.0, 0.0, 1.0];
        let quad = [[2.0, 0.0, -2.0, 0.0], [0.0, 2.0, 0.0, -2.0], [-2.0, 0.0, 2.0, 0.0], [0.0, -2.0, 0.0, 2.0]];
        let mut h = [0.0; 16];
        for a in 0..4 {
            for b in 0..4 {
                h[a * 4 + b] = quad[a][b] - d2 * dh[a] * dh[b];
            }
        }
        Row::local(value, &syms, &g, &h)
    }

    fn track(&self, i: usize, t: usize, outer: bool) -> Row {
        let pr = &self.sc.params;
        let arc = &self.sc.arcs[i];
        let syms = [self.state(i, t, LAT), self.state(i, t, LONG)];
        let ex = syms[0].val - arc.center_lat;
        let ey = syms[1].val - arc.center_long;
        let (inner, outer_slack) = arc.edge_slack([syms[0].val, syms[1].val], pr.w_track);
        // Rows are divided by 2r so they read as distances to the edge.
        let scale = 1.0 / (2.0 * arc.radius);
        let sign = if outer { -scale } else { scale };
        let value = scale * if outer { outer_slack } else { inner };
        let g = [sign * 2.0 * ex, sign * 2.0 * ey];
        let h = [sign * 2.0, 0.0, 0.0, sign * 2.0];
        Row::local(value, &syms, &g, &h)
    }

    fn linear(&self, value: f64, syms: &[Sym], grad: &[f64]) -> Row {
        let h = vec![0.0; syms.len() * syms.len()];
        Row::local(value, syms, grad, &h)
    }

    fn draft(&self, i: usize, t: usize) -> Row {
        let pr = &self.sc.params;
        let o = 1 - i;
        let syms = [
            self.state(i, t - 1, LAT),
            self.state(i, t - 1, LONG),
            self.state(o, t - 1, LAT),
            self.state(o, t - 1, LONG),
            self.control(i, t, TAU),
        ];
        let [lat, long, lato, longo, tau] = syms.map(|s| s.val);
        let (gate, gg, gh) = draft_gate(longo - long, lato - lat, pr);
        let k = pr.tau_draft_max - pr.tau_nom_max;
        let value = pr.tau_nom_max + k * gate - tau;
        // d(Δℓ, Δlat)/d(lat, long, lat_o, long_o)
        let dargs = [[0.0, -1.0, 0.0, 1.0], [-1.0, 0.0, 1.0, 0.0]];
        let mut g = [0.0; 5];
        let mut h = [0.0; 25];
        for a in 0..4 {
            g[a] = k * (gg[0] * dargs[0][a] + gg[1] * dargs[1][a]);
            for b in 0..4 {
                let mut acc = 0.0;
                for p in 0..2 {
                    for q in 0..2 {
                        acc += gh[p][q] * dargs[p][a] * dargs[q][b];
                    }
                }
                h[a * 5 + b] = k * acc;
            }
        }
        g[4] = -1.0;
        Row::local(value, &syms, &g, &h)
    }

    fn dynamics(&self, i: usize, t: usize) -> [Row; 4] {
        let pr = &self.sc.params;
        let dt = pr.dt;
        let v_now = self.state(i, t, VEL);
        let v_prev = self.state(i, t - 1, VEL);
        let th_now = self.state(i, t, HEAD);
        let th_prev = self.state(i, t - 1, HEAD);
        let tau = self.control(i, t, TAU);
        let om = self.control(i, t, OMEGA);
        let (hv, hth) = match pr.dynamics_mode {
            super::params::DynamicsMode::Integrated => (
                self.linear(
                    v_now.val - v_prev.val - dt * (tau.val - pr.c_drag * v_prev.val),
                    &[v_now, v_prev, tau],
                    &[1.0, -1.0 + dt * pr.c_drag, -dt],
                ),
                self.linear(th_now.val - th_prev.val - dt * om.val, &[th_now, th_prev, om], &[1.0, -1.0, -dt]),
            ),
            super::params::DynamicsMode::Direct => (
                self.linear(
                    v_now.val - tau.val + pr.c_drag * v_prev.val,
                    &[v_now, v_prev, tau],
                    &[1.0, pr.c_drag, -1.0],
                ),
                self.linear(th_now.val - om.val, &[th_now, om], &[1.0, -1.0]),
            ),
        };
        let (v, th) = (v_now.val, th_now.val);
        let (s, c) = th.sin_cos();
        let lat_now = self.state(i, t, LAT);
        let lat_prev = self.state(i, t - 1, LAT);
        let long_now = self.state(i, t, LONG);
        let long_prev = self.state(i, t - 1, LONG);
        let hlat = Row::local(
            lat_now.val - lat_prev.val - dt * v * s,
            &[lat_now, lat_prev, v_now, th_now],
            &[1.0, -1.0, -dt * s, -dt * v * c],
            &[
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, -dt * c, //
                0.0, 0.0, -dt * c, dt * v * s,
            ],
        );
        let hlong = Row::local(
            long_now.val - long_prev.val - dt * v * c,
            &[long_now, long_prev, v_now, th_now],
            &[1.0, -1.0, -dt * c, dt * v * s],
            &[
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, dt * s, //
                0.0, 0.0, dt * s, dt * v * c,
            ],
        );
        [hv, hth, hlat, hlong]
    }

    fn cost_rows(&self, i: usize) -> Vec<Row> {
        (1..=self.n_t()).map(|t| self.stage_cost(i, t)).collect()
    }

    fn constraint_rows(&self, i: usize) -> Vec<Row> {
        let pr = &self.sc.params;
        let n_t = self.n_t();
        let mut rows = Vec::with_capacity((INEQ_PER_STEP + EQ_PER_STEP) * n_t);
        for t in 1..=n_t {
            let v = self.state(i, t, VEL);
            let th = self.state(i, t, HEAD);
            let tau = self.control(i, t, TAU);
            let om = self.control(i, t, OMEGA);
            rows.push(self.collision(i, t));
            rows.push(self.track(i, t, false));
            rows.push(self.track(i, t, true));
            rows.push(self.linear(v.val, &[v], &[1.0]));
            rows.push(self.linear(FRAC_PI_2 - th.val, &[th], &[-1.0]));
            rows.push(self.linear(th.val + FRAC_PI_2, &[th], &[1.0]));
            rows.push(self.linear(tau.val - pr.tau_min, &[tau], &[1.0]));
            rows.push(self.draft(i, t));
            rows.push(self.linear(pr.omega_max - om.val, &[om], &[-1.0]));
            rows.push(self.linear(om.val + pr.omega_max, &[om], &[1.0]));
        }
        for t in 1..=n_t {
            rows.extend(self.dynamics(i, t));
        }
        rows
    }
}

/// Rows of one player at the most recent `x`. Solvers ask for values,
/// Jacobian and Hessian at the same point in turn.
struct RowCache {
    sc: std::sync::Arc<Scenario>,
    i: usize,
    last: Mutex<Option<(Vector, std::sync::Arc<Rows>)>>,
}

struct Rows {
    cost: Vec<Row>,
    cons: Vec<Row>,
}

impl RowCache {
    fn get(&self, x: &Vector) -> std::sync::Arc<Rows> {
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((xc, rows)) = last.as_ref() {
            if xc == x {
                return rows.clone();
            }
        }
        let view = View { sc: &self.sc, x };
        let rows = std::sync::Arc::new(Rows {
            cost: view.cost_rows(self.i),
            cons: view.constraint_rows(self.i),
        });
        *last = Some((x.clone(), rows.clone()));
        rows
    }
}

fn player_problem(sc: std::sync::Arc<Scenario>, i: usize) -> PlayerProblem {
    let n_t = sc.params.n_t;
    let n = 12 * n_t;
    let cache = std::sync::Arc::new(RowCache { sc, i, last: Mutex::new(None) });
    let (c1, c2, c3, c4, c5, c6) = (cache.clone(), cache.clone(), cache.clone(), cache.clone(), cache.clone(), cache);
    PlayerProblem::new(
        6 * n_t,
        INEQ_PER_STEP * n_t,
        EQ_PER_STEP * n_t,
        move |x| c1.get(x).cost.iter().map(|r| r.value).sum(),
        move |x| {
            let mut g = Vector::zeros(n);
            for r in &c2.get(x).cost {
                for &(k, v) in &r.grad {
                    g[k] += v;
                }
            }
            g
        },
        move |x| Vector::from_iterator(14 * n_t, c3.get(x).cons.iter().map(|r| r.value)),
        move |x| {
            let rows = c4.get(x);
            let mut j = Matrix::zeros(rows.cons.len(), n);
            for (r, row) in rows.cons.iter().enumerate() {
                for &(k, v) in &row.grad {
                    j[(r, k)] += v;
                }
            }
            j
        },
        move |x, lam| {
            let rows = c5.get(x);
            let mut h = Matrix::zeros(n, n);
            for row in &rows.cost {
                for &(a, b, v) in &row.hess {
                    h[(a, b)] += v;
                }
            }
            for (r, row) in rows.cons.iter().enumerate() {
                let w = lam[r];
                if w == 0.0 {
                    continue;
                }
                for &(a, b, v) in &row.hess {
                    h[(a, b)] -= w * v;
                }
            }
            h
        },
    )
    .with_sparse_derivatives(move |x, lam| {
        let rows = c6.get(x);
        let mut d = SparseDerivatives::default();
        for row in &rows.cost {
            d.hessian.extend(row.hess.iter().copied());
        }
        for (r, row) in rows.cons.iter().enumerate() {
            d.jacobian.extend(row.grad.iter().map(|&(k, v)| (r, k, v)));
            let w = lam[r];
            if w != 0.0 {
                d.hessian.extend(row.hess.iter().map(|&(a, b, v)| (a, b, -w * v)));
            }
        }
        d
    })
}

/// Build the two-player game for one horizon.
pub fn build_game(scenario: &Scenario) -> Result<TwoPlayerGame, BuildError> {
    scenario.params.validate().map_err(BuildError::Params)?;
    scenario.check_start()?;
    let sc = std::sync::Arc::new(scenario.clone());
    Ok(TwoPlayerGame::new(player_problem(sc.clone(), 0), player_problem(sc, 1)))
}

/// Stage costs of player `i` along a joint trajectory, for inspection.
pub fn horizon_stage_costs(scenario: &Scenario, i: usize, x: &Vector) -> Vec<f64> {
    View { sc: scenario, x }.cost_rows(i).iter().map(|r| r.value).collect()
}

/// Joint vector in which both players roll forward from their current
/// states under the given controls.
pub fn joint_rollout(scenario: &Scenario, controls: [&[Control]; 2]) -> Vector {
    let blocks: Vec<Vector> = (0..2)
        .map(|p| {
            let states = super::dynamics::rollout(&scenario.states[p], controls[p], &scenario.params);
            encode_block(&states, controls[p])
        })
        .collect();
    let mut x = Vector::zeros(12 * scenario.params.n_t);
    x.rows_mut(0, blocks[0].len()).copy_from(&blocks[0]);
    x.rows_mut(blocks[0].len(), blocks[1].len()).copy_from(&blocks[1]);
    x
}
