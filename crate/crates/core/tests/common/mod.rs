#![allow(dead_code)]

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stackrace::racing::{joint_rollout, Control, CraftState, RaceParams, Scenario, TrackLayout};
use stackrace::bilevel::Agreement;
use stackrace::mcp::{solve_mcp, Matrix, McpProblem, SolverOptions, Vector};
use stackrace::problems::{PlayerProblem, TwoPlayerGame};

/// `M = A Aᵀ + I` with entries of `A` and `q` uniform in [-1, 1].
pub fn random_monotone_lcp(rng: &mut impl Rng, n: usize) -> (Matrix, Vector) {
    let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let m = &a * a.transpose() + Matrix::identity(n, n);
    let q = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    (m, q)
}

/// Exhaustive active-set enumeration: the unique `z ≥ 0` with `w = Mz + q ≥ 0`
/// and `zᵀw = 0`.
pub fn lcp_oracle(m: &Matrix, q: &Vector) -> Vector {
    let n = q.len();
    for mask in 0..(1usize << n) {
        let free: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let mut z = Vector::zeros(n);
        if !free.is_empty() {
            let k = free.len();
            let sub = Matrix::from_fn(k, k, |r, c| m[(free[r], free[c])]);
            let rhs = Vector::from_fn(k, |r, _| -q[free[r]]);
            let Some(sol) = sub.lu().solve(&rhs) else { continue };
            for (r, &j) in free.iter().enumerate() {
                z[j] = sol[r];
            }
        }
        let w = m * &z + q;
        if z.iter().all(|&v| v >= -1e-12) && w.iter().all(|&v| v >= -1e-12) {
            return z;
        }
    }
    panic!("no complementary basis found");
}

pub fn lcp_problem(m: Matrix, q: Vector) -> McpProblem<'static> {
    let n = q.len();
    let jac = m.clone();
    McpProblem::new(
        Vector::zeros(n),
        Vector::from_element(n, f64::INFINITY),
        move |z: &Vector| &m * z + &q,
        move |_z: &Vector| jac.clone(),
    )
    .unwrap()
}

/// `f_1 = (x_1 − x_2)²`, `f_2 = (x_2 − x_1/2 − 1)²`.
pub fn chase_game() -> TwoPlayerGame {
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

/// Leader `(x_1 − 1)² + x_2²`, follower `(x_2 − x_1)²`.
pub fn stackelberg_game() -> TwoPlayerGame {
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

/// Player `k` minimizes `(x_k − target)²` alone.
pub fn decoupled_game(t1: f64, t2: f64) -> TwoPlayerGame {
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
    TwoPlayerGame::new(p(0, t1), p(1, t2))
}

/// The one-dimensional union-of-pieces instance: minimize `(x − 1.25)²` over
/// `[0, 1] ∪ [1, 2]`.
pub const UNION_PIECES: [(f64, f64); 2] = [(0.0, 1.0), (1.0, 2.0)];

pub fn union_cost(x: f64) -> f64 {
    (x - 1.25).powi(2)
}

/// Restricted solve of one piece from `start`, reported as an agreement.
pub fn union_piece_solve(piece: &(f64, f64), start: f64) -> Result<Agreement, String> {
    let problem = McpProblem::new(
        Vector::from_element(1, piece.0),
        Vector::from_element(1, piece.1),
        |z: &Vector| Vector::from_element(1, 2.0 * (z[0] - 1.25)),
        |_z: &Vector| Matrix::from_element(1, 1, 2.0),
    )
    .map_err(|e| e.to_string())?;
    let sol = solve_mcp(&problem, &Vector::from_element(1, start), &SolverOptions::default())
        .map_err(|e| e.to_string())?;
    if !sol.converged() {
        return Err(format!("{:?}", sol.status));
    }
    Ok(Agreement {
        movement: (sol.z[0] - start).abs(),
        improvement: union_cost(start) - union_cost(sol.z[0]),
    })
}

/// Grid-search oracle: is `x` a local minimum of the cost over `set`, judged
/// on grid points within `radius`?
pub fn grid_local_min(x: f64, set: &[(f64, f64)], resolution: f64, radius: f64) -> bool {
    let steps = (radius / resolution).round() as i64;
    let fx = union_cost(x);
    (-steps..=steps).all(|k| {
        let y = x + k as f64 * resolution;
        let inside = set.iter().any(|&(a, b)| y >= a - 1e-12 && y <= b + 1e-12);
        !inside || union_cost(y) >= fx - 1e-15
    })
}

/// Pieces containing `x`.
pub fn containing(x: f64) -> Vec<(f64, f64)> {
    UNION_PIECES.iter().copied().filter(|&(a, b)| x >= a && x <= b).collect()
}

/// A point with both players near the centerline, inside the state and
/// control bounds, and roughly consistent with the dynamics.
pub fn random_feasible_point(rng: &mut ChaCha8Rng, params: &RaceParams) -> (Scenario, Vector) {
    let track = TrackLayout::default();
    loop {
        let long = rng.gen_range(0.0..240.0);
        let lat = track.center_lat(long) + rng.gen_range(-1.0..1.0);
        let s1 = CraftState::new(lat, long, rng.gen_range(1.5..3.0), rng.gen_range(-0.3..0.3));
        let ang: f64 = rng.gen_range(0.0..2.0 * PI);
        let r = rng.gen_range(1.2..4.0);
        let s2 = CraftState::new(
            lat + r * ang.cos(),
            long + r * ang.sin(),
            s1.v + rng.gen_range(0.0..1.5),
            rng.gen_range(-0.3..0.3),
        );
        let Ok(sc) = Scenario::new(&track, [s1, s2], params) else { continue };
        if sc.check_start().is_err() {
            continue;
        }
        let controls: Vec<Vec<Control>> = (0..2)
            .map(|_| {
                (0..params.n_t)
                    .map(|_| Control::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect()
            })
            .collect();
        let mut x = joint_rollout(&sc, [&controls[0], &controls[1]]);
        for k in 0..x.len() {
            x[k] += rng.gen_range(-1e-2..1e-2);
        }
        return (sc, x);
    }
}

