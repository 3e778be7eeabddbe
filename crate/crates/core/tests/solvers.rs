mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stackrace::bilevel::{piece_verdicts, solve_bilevel, BilevelOptions, BilevelStatus, FollowerKkt};
use stackrace::mcp::{classify_indices, fb_residual, solve_mcp, Matrix, McpProblem, SolverOptions, Vector};
use stackrace::nash::{assemble_kkt_mcp, kkt_certificate, solve_nash, KktLayout};
use stackrace::problems::{check_derivatives, PlayerProblem, TwoPlayerGame};

#[test]
fn two_dimensional_lcp_matches_enumeration() {
    let m = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let q = Vector::from_vec(vec![-1.0, -1.0]);
    let oracle = lcp_oracle(&m, &q);
    assert!((oracle[0] - 1.0 / 3.0).abs() < 1e-14 && (oracle[1] - 1.0 / 3.0).abs() < 1e-14);
    let sol = solve_mcp(&lcp_problem(m, q), &Vector::zeros(2), &SolverOptions::default()).unwrap();
    assert!(sol.converged());
    assert!((&sol.z - &oracle).amax() <= 1e-10);
}

#[test]
fn random_lcps_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..100 {
        let n = 1 + k % 10;
        let (m, q) = random_monotone_lcp(&mut rng, n);
        let oracle = lcp_oracle(&m, &q);
        let sol = solve_mcp(&lcp_problem(m, q), &Vector::zeros(n), &SolverOptions::default()).unwrap();
        assert!(sol.converged(), "instance {k}: {:?}", sol.status);
        assert!((&sol.z - &oracle).amax() <= 1e-6, "instance {k}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converged_points_satisfy_one_clause(seed in any::<u64>(), n in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, q) = random_monotone_lcp(&mut rng, n);
        let problem = lcp_problem(m, q);
        let sol = solve_mcp(&problem, &Vector::zeros(n), &SolverOptions::default()).unwrap();
        prop_assert!(sol.converged());
        prop_assert!(sol.z.iter().all(|&v| v >= 0.0));
        prop_assert!(fb_residual(&problem, &sol.z).amax() <= 1e-8);
        let c = classify_indices(&problem, &sol.z, 1e-6).unwrap();
        prop_assert_eq!(c.len(), n);
        let mut seen = vec![0; n];
        for j in c.interior.iter().chain(&c.at_lower).chain(&c.at_upper).chain(&c.degenerate_indices()) {
            seen[*j] += 1;
        }
        prop_assert!(seen.iter().all(|&k| k == 1));
    }

    #[test]
    fn solve_is_deterministic(seed in any::<u64>(), n in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, q) = random_monotone_lcp(&mut rng, n);
        let problem = lcp_problem(m, q);
        let z0 = Vector::from_element(n, 0.5);
        let a = solve_mcp(&problem, &z0, &SolverOptions::default()).unwrap();
        let b = solve_mcp(&problem, &z0, &SolverOptions::default()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn residual_zero_exactly_at_solutions(z in 0.0f64..3.0, f in -3.0f64..3.0) {
        let problem = McpProblem::new(
            Vector::zeros(1),
            Vector::from_element(1, f64::INFINITY),
            move |_z: &Vector| Vector::from_element(1, f),
            |_z: &Vector| Matrix::zeros(1, 1),
        ).unwrap();
        let r = fb_residual(&problem, &Vector::from_element(1, z))[0];
        let solves = (z == 0.0 && f >= 0.0) || (f == 0.0);
        prop_assert_eq!(r == 0.0, solves);
        prop_assert_eq!(classify_indices(&problem, &Vector::from_element(1, z), 1e-6).is_ok(), r.abs() <= 1e-4);
    }
}

#[test]
fn chase_game_equilibrium() {
    let g = chase_game();
    let r = solve_nash(&g, &Vector::zeros(2), None, &SolverOptions::default()).unwrap();
    assert!((r.x[0] - 2.0).abs() <= 1e-8 && (r.x[1] - 2.0).abs() <= 1e-8);
    assert_eq!(r.z0, Vector::zeros(2));
}

#[test]
fn decoupled_minima() {
    let g = decoupled_game(0.0, 0.0);
    let r = solve_nash(&g, &Vector::from_vec(vec![3.0, -1.0]), None, &SolverOptions::default()).unwrap();
    assert!(r.x.amax() <= 1e-12);
}

#[test]
fn unconstrained_kkt_is_stacked_gradients() {
    let g = chase_game();
    let layout = KktLayout::for_game(&g);
    assert_eq!(layout.total_dim, 2);
    let mcp = assemble_kkt_mcp(&g).unwrap();
    let x = Vector::from_vec(vec![3.0, 2.0]);
    assert_eq!(mcp.eval_f(&x), Vector::from_vec(vec![2.0, 2.0 * (2.0 - 1.5 - 1.0)]));
}

/// Each player minimizes `(x_i − t_i)²` subject to `x_i ≥ 1`.
fn bounded_game(t1: f64, t2: f64) -> TwoPlayerGame {
    let p = |k: usize, t: f64| {
        PlayerProblem::new(
            1,
            1,
            0,
            move |x: &Vector| (x[k] - t).powi(2),
            move |x: &Vector| {
                let mut g = Vector::zeros(2);
                g[k] = 2.0 * (x[k] - t);
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
    TwoPlayerGame::new(p(0, t1), p(1, t2))
}

#[test]
fn inequality_dual_rows_hold_constraint_values() {
    let g = bounded_game(0.0, 3.0);
    let layout = KktLayout::for_game(&g);
    assert_eq!(layout.total_dim, 4);
    let (l, u) = layout.bounds();
    for i in 0..2 {
        let r = layout.duals[i].all();
        assert_eq!(l[r.start], 0.0);
        assert_eq!(u[r.start], f64::INFINITY);
    }
    let mcp = assemble_kkt_mcp(&g).unwrap();
    let z = Vector::from_vec(vec![0.25, 4.0, 0.0, 0.0]);
    let f = mcp.eval_f(&z);
    assert_eq!(f[layout.duals[0].all().start], -0.75);
    assert_eq!(f[layout.duals[1].all().start], 3.0);

    let r = solve_nash(&g, &Vector::zeros(2), None, &SolverOptions::default()).unwrap();
    assert!((r.x[0] - 1.0).abs() <= 1e-10 && (r.x[1] - 3.0).abs() <= 1e-10);
    assert!((r.duals[0][0] - 2.0).abs() <= 1e-10);
    for i in 0..2 {
        assert!(kkt_certificate(&g, i, &r.x, &r.duals[i]).passes(1e-8));
    }
}

#[test]
fn stackelberg_toy() {
    let g = stackelberg_game();
    let r = solve_bilevel(&g, 0, &Vector::zeros(2), None, &BilevelOptions::default()).unwrap();
    assert_eq!(r.status, BilevelStatus::Equilibrium);
    assert!((r.x[0] - 0.5).abs() <= 1e-6 && (r.x[1] - 0.5).abs() <= 1e-6);
    assert!((r.leader_cost - 0.5).abs() <= 1e-6);
}

#[test]
fn decoupled_bilevel_is_nash() {
    let g = decoupled_game(1.5, -0.25);
    let nash = solve_nash(&g, &Vector::zeros(2), None, &SolverOptions::default()).unwrap();
    for leader in 0..2 {
        let b = solve_bilevel(&g, leader, &Vector::zeros(2), None, &BilevelOptions::default()).unwrap();
        assert!(b.is_equilibrium());
        assert!((&b.x - &nash.x).amax() <= 1e-8);
    }
}

#[test]
fn union_of_pieces_classification() {
    let res = 1e-3;
    let radius = 0.05;
    // Interior optimum of the second piece.
    let x = 1.25;
    let pieces = containing(x);
    assert_eq!(pieces, vec![(1.0, 2.0)]);
    let verdicts = piece_verdicts(&pieces, |p| union_piece_solve(p, x), 1e-6, 1e-8).unwrap();
    assert_eq!(verdicts, vec![true]);
    assert!(grid_local_min(x, &UNION_PIECES, res, radius));
    assert!(grid_local_min(x, &pieces[..1], res, radius));

    // The shared boundary point: optimal for [0, 1] only.
    let x = 1.0;
    let pieces = containing(x);
    assert_eq!(pieces.len(), 2);
    let verdicts = piece_verdicts(&pieces, |p| union_piece_solve(p, x), 1e-6, 1e-8).unwrap();
    let oracle: Vec<bool> = pieces.iter().map(|p| grid_local_min(x, std::slice::from_ref(p), res, radius)).collect();
    assert_eq!(verdicts, vec![true, false]);
    assert_eq!(verdicts, oracle);
    assert!(!grid_local_min(x, &UNION_PIECES, res, radius));
    assert_eq!(verdicts.iter().all(|&v| v), grid_local_min(x, &UNION_PIECES, res, radius));
}

#[test]
fn follower_kkt_jacobian_matches_differences() {
    let g = bounded_game(0.3, 2.0);
    let kkt = FollowerKkt::new(&g, 1);
    let x = Vector::from_vec(vec![0.7, 1.4]);
    let lam = Vector::from_element(1, 0.2);
    let jac = kkt.jacobian(&x, &lam);
    let h = 1e-6;
    for c in 0..3 {
        let bump = |s: f64| {
            let (mut xp, mut lp) = (x.clone(), lam.clone());
            if c < 2 {
                xp[c] += s;
            } else {
                lp[c - 2] += s;
            }
            kkt.eval(&xp, &lp)
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        for r in 0..fd.len() {
            assert!((fd[r] - jac[(r, c)]).abs() <= 1e-8, "row {r} column {c}");
        }
    }
    let a = Vector::from_vec(vec![0.4, -1.1]);
    let wg = kkt.weighted_gradient(&x, &lam, &a);
    let dense = jac.transpose() * &a;
    assert!((wg - dense).amax() <= 1e-14);
}

#[test]
fn quadratic_derivative_check() {
    let g = chase_game();
    let r = check_derivatives(&g, &Vector::from_vec(vec![0.3, -1.2]), 1e-5);
    assert!(r.max() <= 1e-6);
    let b = bounded_game(0.0, 1.0);
    let r = check_derivatives(&b, &Vector::from_vec(vec![2.0, 0.5]), 1e-5);
    assert!(r.players.iter().all(|p| p.constraint_jacobian <= 1e-10));
}
