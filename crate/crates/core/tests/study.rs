use std::collections::BTreeMap;

use proptest::prelude::*;
use stackrace::config::Config;
use stackrace::racing::*;
use stackrace::sim::*;
use stackrace::study::*;

const S: StrategyKind = StrategyKind::SinglePlayer;
const N: StrategyKind = StrategyKind::Nash;
const L: StrategyKind = StrategyKind::Leader;
const F: StrategyKind = StrategyKind::Follower;

/// Reference P1 cost table (×100), rows P2 = S, N, L, F and columns P1.
const REFERENCE_COSTS: [[f64; 4]; 4] = [
    [1.214, 0.30, 0.64, 0.67],
    [2.09, 1.148, 0.30, 0.22],
    [1.23, 1.41, 0.625, 0.13],
    [1.75, 2.05, 1.80, 1.200],
];

fn transpose(t: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    std::array::from_fn(|r| std::array::from_fn(|c| t[c][r]))
}

#[test]
fn reference_costs_have_follower_follower_equilibrium() {
    let eq = meta_game_nash(&REFERENCE_COSTS, &transpose(&REFERENCE_COSTS));
    assert_eq!(eq, vec![CompetitionType::new(F, F)]);
}

#[test]
fn constant_game_is_all_equilibria() {
    let z = [[0.0; 4]; 4];
    assert_eq!(meta_game_nash(&z, &z).len(), 16);
}

#[test]
fn dominant_strategy_equilibrium() {
    // Column L is strictly cheapest for P1 in every row; P2 faces the transpose.
    let mut t = [[1.0; 4]; 4];
    for (r, row) in t.iter_mut().enumerate() {
        row[L.index()] = 0.1 * r as f64;
        row[S.index()] = 2.0 + r as f64;
    }
    let eq = meta_game_nash(&t, &transpose(&t));
    let brute: Vec<CompetitionType> = CompetitionType::all()
        .into_iter()
        .filter(|p| {
            let (r, c) = (p.p2.index(), p.p1.index());
            let p2 = transpose(&t);
            (0..4).all(|c2| t[r][c] <= t[r][c2]) && (0..4).all(|r2| p2[r][c] <= p2[r2][c])
        })
        .collect();
    assert_eq!(eq, vec![CompetitionType::new(L, L)]);
    let mut sorted = brute;
    sorted.sort();
    assert_eq!(eq, sorted);
}

proptest! {
    #[test]
    fn meta_game_invariant_under_shift(
        vals in prop::array::uniform16(0.0f64..3.0),
        shift in -10.0f64..10.0,
    ) {
        // Values on a dyadic grid so the shifted sums are exact.
        let q = |x: f64| (x * 64.0).round() / 64.0;
        let t: [[f64; 4]; 4] = std::array::from_fn(|r| std::array::from_fn(|c| q(vals[4 * r + c])));
        let shifted = t.map(|row| row.map(|v| v + q(shift)));
        prop_assert_eq!(
            meta_game_nash(&t, &transpose(&t)),
            meta_game_nash(&shifted, &transpose(&shifted))
        );
    }
}

#[test]
fn cell_statistics() {
    let a = CellStat::of(&[1.0, 1.0, 1.0, 1.0]);
    assert_eq!((a.mean, a.half_ci), (1.0, 0.0));
    let b = CellStat::of(&[0.0, 2.0]);
    assert_eq!(b.mean, 1.0);
    assert!((b.half_ci - 1.96).abs() < 1e-12);
}

#[test]
fn sampled_conditions_are_feasible_and_in_range() {
    let p = RaceParams::default();
    let track = TrackLayout::default();
    let cs = sample_initial_conditions(60, &p, &track, 5).unwrap();
    assert_eq!(cs.len(), 60);
    for (k, c) in cs.iter().enumerate() {
        assert_eq!(c.index, k);
        let d = ((c.p1.p_lat - c.p2.p_lat).powi(2) + (c.p1.p_long - c.p2.p_long).powi(2)).sqrt();
        assert!((1.2 - 1e-12..=2.4 + 1e-12).contains(&d));
        assert!((1.5..=3.0).contains(&c.p1.v));
        assert!((0.0..=1.5).contains(&(c.p2.v - c.p1.v)));
        assert_eq!((c.p1.theta, c.p2.theta), (0.0, 0.0));
        assert!(check_state(&c.states(), &track, &p).is_none());
        assert!((0.0..track.pattern_period).contains(&c.track_phase));
    }
    assert_eq!(cs, sample_initial_conditions(60, &p, &track, 5).unwrap());
    assert_ne!(cs, sample_initial_conditions(60, &p, &track, 6).unwrap());
    // A prefix of a larger draw is the smaller draw.
    assert_eq!(cs[..10], sample_initial_conditions(10, &p, &track, 5).unwrap()[..]);
}

fn summary(pair: CompetitionType, steps: usize, costs: [f64; 2]) -> TraceSummary {
    TraceSummary {
        pair,
        seed: 0,
        steps_completed: steps,
        termination: "completed".into(),
        total_costs: costs,
        fallback_steps: [0, 0],
    }
}

#[test]
fn tables_fill_sixteen_entries_by_symmetry() {
    let mut cells = BTreeMap::new();
    for c in CompetitionType::canonical_cells() {
        let base = (c.p1.index() * 4 + c.p2.index()) as f64;
        cells.insert(
            c,
            vec![summary(c, 20, [base, 100.0 + base]), summary(c, 22, [base + 2.0, 102.0 + base])],
        );
    }
    let r = StudyResults::from_summaries(cells).unwrap();
    assert_eq!(r.n_conditions, 2);
    for pair in CompetitionType::all() {
        let canon = pair.canonical();
        let base = (canon.p1.index() * 4 + canon.p2.index()) as f64;
        let expected = if pair.is_canonical() { base + 1.0 } else { 101.0 + base };
        assert_eq!(r.cost_table.get(pair).mean, expected, "{pair}");
        assert_eq!(r.steps_table.get(pair).mean, 21.0);
        assert_eq!(r.steps_table.get(pair), r.steps_table.get(pair.swapped()));
    }
    let p2 = r.cost_table_p2();
    for pair in CompetitionType::all() {
        assert_eq!(p2.get(pair).mean, r.cost_table.get(pair.swapped()).mean);
    }
    let text = summarize(&r);
    assert!(text.contains("Average"));
    assert!(text.contains("meta-game pure equilibria"));
}

#[test]
fn missing_cell_is_incomplete() {
    let mut cells = BTreeMap::new();
    for c in CompetitionType::canonical_cells().into_iter().skip(1) {
        cells.insert(c, vec![summary(c, 1, [0.0; 2]); 2]);
    }
    assert!(matches!(StudyResults::from_summaries(cells), Err(StudyError::Incomplete(_))));
}

fn small_settings() -> SimSettings {
    SimSettings::new(RaceParams::default(), TrackLayout::default())
}

#[test]
fn persisted_study_round_trips_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_settings();
    let conditions = sample_initial_conditions(2, &s.params, &s.track, 3).unwrap();
    let cells = [CompetitionType::new(S, S)];
    let manifest = Manifest {
        version: "test".into(),
        master_seed: 3,
        n_conditions: 2,
        horizon_steps: 2,
        cells: cells.iter().map(|c| c.label()).collect(),
        cost_accounting: COST_ACCOUNTING.into(),
    };
    let err = run_persisted(dir.path(), &manifest, &conditions, &cells, &s, 1, &|_, _| {}).unwrap_err();
    assert!(matches!(err, StudyError::Incomplete(_)));
    let traces: Vec<SimTrace> = conditions
        .iter()
        .map(|c| simulate(c.states(), cells[0], &s, 2, c.seed))
        .collect();
    for (c, t) in conditions.iter().zip(&traces) {
        let stored = read_trace(&trace_path(dir.path(), cells[0], c.index), cells[0]).unwrap();
        assert_eq!(stored.summary, t.summary());
        assert_eq!(stored.stage_costs, t.steps.iter().map(|s| s.stage_costs).collect::<Vec<_>>());
    }
    assert_eq!(read_conditions(dir.path()).unwrap(), conditions);

    // A rerun reuses every trace.
    let reused = std::sync::Mutex::new(None);
    let _ = run_persisted(dir.path(), &manifest, &conditions, &cells, &s, 1, &|p, t| {
        assert!(t.is_none());
        *reused.lock().unwrap() = Some(p);
    });
    assert_eq!(reused.into_inner().unwrap(), Some(Progress { done: 2, total: 2, reused: 2 }));
}

#[test]
fn worker_count_does_not_change_results() {
    let s = small_settings();
    let conditions = sample_initial_conditions(2, &s.params, &s.track, 11).unwrap();
    let cells = [CompetitionType::new(S, S), CompetitionType::new(S, N)];
    let a = run_study(&conditions, &cells, &s, 2, 1, &|_, _| {}).unwrap();
    let b = run_study(&conditions, &cells, &s, 2, 3, &|_, _| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.values().map(Vec::len).sum::<usize>(), cells.len() * conditions.len());
}

#[test]
fn mean_cost_curve_counts_live_traces() {
    let traces = vec![vec![[1.0, 2.0], [3.0, 4.0]], vec![[3.0, 0.0]]];
    let curve = mean_cost_curve(&traces, 3);
    assert_eq!(curve, vec![(0, [2.0, 1.0], 2), (1, [3.0, 4.0], 1)]);
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let c = Config::default();
    assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    let custom = Config::parse("[race]\nbeta = 0.2\n[study]\nn_conditions = 7\n").unwrap();
    assert_eq!(custom.race.beta, 0.2);
    assert_eq!(custom.study.n_conditions, 7);
    assert_eq!(custom.race.n_t, 10);
    assert!(Config::parse("[race]\nbogus = 1\n").is_err());
    assert!(Config::parse("[study]\nn_conditions = 0\n").is_err());
}

#[test]
fn config_resolves_track_file_relative_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    let track: String = (0..12).map(|k| format!("{} {}\n", k as f64 * 5.0, if k % 2 == 0 { 0.01 } else { -0.01 })).collect();
    std::fs::write(dir.path().join("track.txt"), track).unwrap();
    std::fs::write(dir.path().join("run.toml"), "[track]\nfile = \"track.txt\"\n").unwrap();
    let c = Config::load(&dir.path().join("run.toml")).unwrap();
    assert_eq!(c.track.file.as_deref(), Some(dir.path().join("track.txt").as_path()));
    let t = c.track_layout().unwrap();
    assert_eq!(t.checkpoints.len(), 12);
}
