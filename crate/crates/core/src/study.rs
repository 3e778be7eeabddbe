//! Monte Carlo competition study: sampling, the cell runs, and the
//! robustness and cost tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::racing::{CraftState, RaceParams, TrackLayout};
use crate::sim::{
    check_state, simulate, CompetitionType, FallbackLevel, SimSettings, SimTrace, StrategyKind, TraceSummary,
};

pub const MAX_REJECTIONS: usize = 1000;
pub const P2_RADIUS: (f64, f64) = (1.2, 2.4);
pub const V1_RANGE: (f64, f64) = (1.5, 3.0);
pub const V_OFFSET_RANGE: (f64, f64) = (0.0, 1.5);
pub const COST_DISPLAY_SCALE: f64 = 100.0;
/// Normal quantile for a two-sided 95% interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("condition {index}: no feasible sample after {rejections} rejections")]
    SamplingExhausted { index: usize, rejections: usize },
    #[error("results incomplete: {0}")]
    Incomplete(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StudyError + '_ {
    move |source| StudyError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialCondition {
    pub index: usize,
    pub seed: u64,
    pub track_phase: f64,
    pub p1: CraftState,
    pub p2: CraftState,
}

impl InitialCondition {
    pub fn states(&self) -> [CraftState; 2] {
        [self.p1, self.p2]
    }
}

fn sample_one(
    index: usize,
    seed: u64,
    params: &RaceParams,
    track: &TrackLayout,
) -> Result<InitialCondition, StudyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejections = 0;
    let exhausted = |rejections| StudyError::SamplingExhausted { index, rejections };
    let phase = rng.gen_range(0.0..track.pattern_period);
    let v1 = rng.gen_range(V1_RANGE.0..=V1_RANGE.1);
    let v2 = v1 + rng.gen_range(V_OFFSET_RANGE.0..=V_OFFSET_RANGE.1);
    let center = track.center_lat(phase);
    let half = 0.5 * params.w_track;
    let p1 = loop {
        let s = CraftState::new(center + rng.gen_range(-half..half), phase, v1, 0.0);
        if track.on_track(s.position()).unwrap_or(false) {
            break s;
        }
        rejections += 1;
        if rejections >= MAX_REJECTIONS {
            return Err(exhausted(rejections));
        }
    };
    loop {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = rng.gen_range(P2_RADIUS.0..=P2_RADIUS.1);
        let p2 = CraftState::new(p1.p_lat + r * angle.sin(), p1.p_long + r * angle.cos(), v2, 0.0);
        if check_state(&[p1, p2], track, params).is_none() {
            return Ok(InitialCondition { index, seed, track_phase: phase, p1, p2 });
        }
        rejections += 1;
        if rejections >= MAX_REJECTIONS {
            return Err(exhausted(rejections));
        }
    }
}

/// Draws `n` feasible starts. Condition `k` depends only on the master seed
/// and `k`.
pub fn sample_initial_conditions(
    n: usize,
    params: &RaceParams,
    track: &TrackLayout,
    master_seed: u64,
) -> Result<Vec<InitialCondition>, StudyError> {
    let mut master = ChaCha8Rng::seed_from_u64(master_seed);
    let seeds: Vec<u64> = (0..n).map(|_| master.gen()).collect();
    seeds.iter().enumerate().map(|(k, &s)| sample_one(k, s, params, track)).collect()
}

/// Runs every condition through every cell on `workers` threads (zero for
/// the default). `on_trace` sees each trace as it finishes, in any order.
/// The returned map lists traces in condition order.
pub fn run_study(
    conditions: &[InitialCondition],
    cells: &[CompetitionType],
    settings: &SimSettings,
    horizon_steps: usize,
    workers: usize,
    on_trace: &(dyn Fn(usize, &SimTrace) + Sync),
) -> Result<BTreeMap<CompetitionType, Vec<SimTrace>>, StudyError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| StudyError::Pool(e.to_string()))?;
    let jobs: Vec<(CompetitionType, &InitialCondition)> =
        conditions.iter().flat_map(|ic| cells.iter().map(move |&c| (c, ic))).collect();
    let traces: Vec<SimTrace> = pool.install(|| {
        jobs.par_iter()
            .map(|(cell, ic)| {
                let t = simulate(ic.states(), *cell, settings, horizon_steps, ic.seed);
                on_trace(ic.index, &t);
                t
            })
            .collect()
    });
    let mut out: BTreeMap<CompetitionType, Vec<SimTrace>> = BTreeMap::new();
    for ((cell, _), t) in jobs.into_iter().zip(traces) {
        out.entry(cell).or_default().push(t);
    }
    Ok(out)
}

/// Mean and 95% half-width of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub mean: f64,
    pub half_ci: f64,
    pub n: usize,
}

impl CellStat {
    pub fn of(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let half_ci = if n < 2 {
            f64::NAN
        } else {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            Z95 * var.sqrt() / (n as f64).sqrt()
        };
        Self { mean, half_ci, n }
    }

    pub fn overlaps(&self, other: &CellStat) -> bool {
        (self.mean - other.mean).abs() <= self.half_ci + other.half_ci
    }
}

/// A 4×4 table indexed `[P2 strategy][P1 strategy]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub cells: [[CellStat; 4]; 4],
    /// Mean of each P1 strategy's column.
    pub averages: [f64; 4],
}

impl Table {
    fn from_fn(f: impl Fn(usize, usize) -> CellStat) -> Self {
        let cells: [[CellStat; 4]; 4] = std::array::from_fn(|r| std::array::from_fn(|c| f(r, c)));
        let averages = std::array::from_fn(|c| (0..4).map(|r| cells[r][c].mean).sum::<f64>() / 4.0);
        Self { cells, averages }
    }

    pub fn get(&self, pair: CompetitionType) -> &CellStat {
        &self.cells[pair.p2.index()][pair.p1.index()]
    }

    pub fn means(&self) -> [[f64; 4]; 4] {
        self.cells.map(|row| row.map(|c| c.mean))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(|r, c| self.cells[c][r])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResults {
    pub n_conditions: usize,
    pub cells: BTreeMap<CompetitionType, Vec<TraceSummary>>,
    pub steps_table: Table,
    /// Total running cost of P1; P2's table is its transpose.
    pub cost_table: Table,
    pub meta_equilibria: Vec<CompetitionType>,
}

impl StudyResults {
    /// Fills all 16 entries from the 10 canonical cells.
    pub fn from_summaries(cells: BTreeMap<CompetitionType, Vec<TraceSummary>>) -> Result<Self, StudyError> {
        let canonical = CompetitionType::canonical_cells();
        let n = cells.get(&canonical[0]).map(Vec::len).unwrap_or(0);
        for c in &canonical {
            let have = cells.get(c).map(Vec::len).unwrap_or(0);
            if have == 0 || have != n {
                return Err(StudyError::Incomplete(format!("cell {c} has {have} traces, expected {n}")));
            }
        }
        if n < 2 {
            return Err(StudyError::Incomplete(format!("{n} traces per cell; at least 2 are needed")));
        }
        // The player in `pair` who plays P1's strategy, and its canonical cell.
        let source = |pair: CompetitionType| {
            if pair.is_canonical() {
                (&cells[&pair], 0)
            } else {
                (&cells[&pair.canonical()], 1)
            }
        };
        let pair_at = |r: usize, c: usize| CompetitionType::new(StrategyKind::ALL[c], StrategyKind::ALL[r]);
        let steps_table = Table::from_fn(|r, c| {
            let (traces, _) = source(pair_at(r, c));
            CellStat::of(&traces.iter().map(|t| t.steps_completed as f64).collect::<Vec<_>>())
        });
        let cost_table = Table::from_fn(|r, c| {
            let (traces, p) = source(pair_at(r, c));
            CellStat::of(&traces.iter().map(|t| t.total_costs[p]).collect::<Vec<_>>())
        });
        let p2 = cost_table.transpose();
        let meta_equilibria = meta_game_nash(&cost_table.means(), &p2.means());
        Ok(Self { n_conditions: n, cells, steps_table, cost_table, meta_equilibria })
    }

    pub fn cost_table_p2(&self) -> Table {
        self.cost_table.transpose()
    }
}

/// Pure equilibria of the bimatrix game in which P1 picks the column and P2
/// the row, both minimizing. Tables are indexed `[row][column]`.
pub fn meta_game_nash(cost_p1: &[[f64; 4]; 4], cost_p2: &[[f64; 4]; 4]) -> Vec<CompetitionType> {
    let mut out = Vec::new();
    for r in 0..4 {
        for c in 0..4 {
            let p1_best = (0..4).all(|c2| cost_p1[r][c] <= cost_p1[r][c2]);
            let p2_best = (0..4).all(|r2| cost_p2[r][c] <= cost_p2[r2][c]);
            if p1_best && p2_best {
                out.push(CompetitionType::new(StrategyKind::ALL[c], StrategyKind::ALL[r]));
            }
        }
    }
    out
}

fn write_table(out: &mut String, title: &str, table: &Table, scale: f64, precision: usize) {
    let label = 14;
    let texts: Vec<Vec<String>> = table
        .cells
        .iter()
        .map(|row| {
            row.iter()
                .map(|cell| format!("{:.p$} ±{:.p$}", cell.mean * scale, cell.half_ci * scale, p = precision))
                .collect()
        })
        .collect();
    let w = 2 + texts.iter().flatten().map(|t| t.chars().count()).max().unwrap_or(0).max(12);
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<label$}", "P2 \\ P1");
    for s in StrategyKind::ALL {
        let _ = write!(out, "{:>w$}", format!("{s:?}"));
    }
    out.push('\n');
    for (s, row) in StrategyKind::ALL.iter().zip(&texts) {
        let _ = write!(out, "{:<label$}", format!("{s:?}"));
        for txt in row {
            let _ = write!(out, "{txt:>w$}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<label$}", "Average");
    for a in table.averages {
        let _ = write!(out, "{:>w$}", format!("{:.p$}", a * scale, p = precision));
    }
    out.push_str("\n\n");
}

/// Cells whose intervals overlap the smallest entry of `table`.
pub fn overlapping_minimum(table: &Table) -> (CompetitionType, Vec<CompetitionType>) {
    let all = CompetitionType::all();
    let best = *all
        .iter()
        .min_by(|a, b| table.get(**a).mean.total_cmp(&table.get(**b).mean))
        .expect("16 cells");
    let overlaps = all
        .into_iter()
        .filter(|&p| p != best && table.get(p).overlaps(table.get(best)))
        .collect();
    (best, overlaps)
}

/// Aligned plain-text tables, averages and meta-game equilibria.
pub fn summarize(results: &StudyResults) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "conditions per cell: {}\n", results.n_conditions);
    write_table(
        &mut out,
        "Robustness: mean completed steps (±95% CI)",
        &results.steps_table,
        1.0,
        2,
    );
    write_table(
        &mut out,
        "Performance: mean total running cost for P1 (x100, ±95% CI)",
        &results.cost_table,
        COST_DISPLAY_SCALE,
        3,
    );
    let names: Vec<String> = results.meta_equilibria.iter().map(|c| c.label()).collect();
    let _ = writeln!(out, "meta-game pure equilibria (P1-P2): {{{}}}", names.join(", "));
    for (label, table) in [("steps", &results.steps_table), ("cost", &results.cost_table)] {
        let (best, overlaps) = overlapping_minimum(table);
        let list: Vec<String> = overlaps.iter().map(|c| c.label()).collect();
        let _ = writeln!(
            out,
            "{label}: minimum cell {best}; intervals overlapping it: {}",
            if list.is_empty() { "none".to_string() } else { list.join(", ") }
        );
    }
    out
}

/// Mean stage cost per step of each player, over the traces still running
/// at that step.
pub fn mean_cost_curve(traces: &[Vec<[f64; 2]>], horizon_steps: usize) -> Vec<(usize, [f64; 2], usize)> {
    (0..horizon_steps)
        .filter_map(|k| {
            let live: Vec<&[f64; 2]> = traces.iter().filter_map(|t| t.get(k)).collect();
            if live.is_empty() {
                return None;
            }
            let n = live.len() as f64;
            let mean = [0, 1].map(|p| live.iter().map(|c| c[p]).sum::<f64>() / n);
            Some((k, mean, live.len()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub master_seed: u64,
    pub n_conditions: usize,
    pub horizon_steps: usize,
    pub cells: Vec<String>,
    pub cost_accounting: String,
}

pub const COST_ACCOUNTING: &str =
    "sum of realized stage costs over executed steps; terminated traces contribute partial sums";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryRow {
    cell: String,
    condition: usize,
    seed: u64,
    steps_completed: usize,
    termination: String,
    p1_cost: f64,
    p2_cost: f64,
    p1_fallback_steps: usize,
    p2_fallback_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConditionRow {
    index: usize,
    seed: u64,
    track_phase: f64,
    p1_lat: f64,
    p1_long: f64,
    p1_v: f64,
    p1_theta: f64,
    p2_lat: f64,
    p2_long: f64,
    p2_v: f64,
    p2_theta: f64,
}

pub fn trace_path(dir: &Path, cell: CompetitionType, condition: usize) -> PathBuf {
    dir.join("traces").join(cell.label()).join(format!("{condition:04}.csv"))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> StudyError + '_ {
    move |e| StudyError::Format { path: path.to_path_buf(), message: e.to_string() }
}

fn format_err(path: &Path, message: impl Into<String>) -> StudyError {
    StudyError::Format { path: path.to_path_buf(), message: message.into() }
}

/// Writes `bytes` through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StudyError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_conditions(dir: &Path, conditions: &[InitialCondition]) -> Result<(), StudyError> {
    let path = dir.join("conditions.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in conditions {
        w.serialize(ConditionRow {
            index: c.index,
            seed: c.seed,
            track_phase: c.track_phase,
            p1_lat: c.p1.p_lat,
            p1_long: c.p1.p_long,
            p1_v: c.p1.v,
            p1_theta: c.p1.theta,
            p2_lat: c.p2.p_lat,
            p2_long: c.p2.p_long,
            p2_v: c.p2.v,
            p2_theta: c.p2.theta,
        })
        .map_err(csv_err(&path))?;
    }
    let bytes = w.into_inner().map_err(|e| format_err(&path, e.to_string()))?;
    write_atomic(&path, &bytes)
}

pub fn read_conditions(dir: &Path) -> Result<Vec<InitialCondition>, StudyError> {
    let path = dir.join("conditions.csv");
    let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    r.deserialize::<ConditionRow>()
        .map(|row| {
            let c = row.map_err(csv_err(&path))?;
            Ok(InitialCondition {
                index: c.index,
                seed: c.seed,
                track_phase: c.track_phase,
                p1: CraftState::new(c.p1_lat, c.p1_long, c.p1_v, c.p1_theta),
                p2: CraftState::new(c.p2_lat, c.p2_long, c.p2_v, c.p2_theta),
            })
        })
        .collect()
}

/// Writes one trace's step records under `traces/<cell>/<condition>.csv`.
pub fn write_trace(dir: &Path, condition: usize, trace: &SimTrace) -> Result<(), StudyError> {
    let path = trace_path(dir, trace.pair, condition);
    let mut text = format!(
        "# termination={} seed={} horizon_steps={}\n",
        trace.termination.name(),
        trace.seed,
        trace.horizon_steps
    );
    text.push_str(&trace.to_records());
    write_atomic(&path, text.as_bytes())
}

/// A trace record file read back: its summary and per-step stage costs.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTrace {
    pub summary: TraceSummary,
    pub stage_costs: Vec<[f64; 2]>,
}

fn header_field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.trim_start_matches('#')
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

pub fn read_trace(path: &Path, cell: CompetitionType) -> Result<StoredTrace, StudyError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let first = text.lines().next().unwrap_or("");
    let field = |key: &str| header_field(first, key).ok_or_else(|| format_err(path, format!("header lacks {key}")));
    let termination = field("termination")?.to_string();
    let seed: u64 = field("seed")?.parse().map_err(|_| format_err(path, "bad seed"))?;
    let horizon: usize = field("horizon_steps")?.parse().map_err(|_| format_err(path, "bad horizon_steps"))?;

    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = r.headers().map_err(csv_err(path))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| format_err(path, format!("missing column {name}")))
    };
    let cost_cols = [col("p1_cost")?, col("p2_cost")?];
    let fb_cols = [col("p1_fallback")?, col("p2_fallback")?];
    let mut stage_costs = Vec::new();
    let mut fallback_steps = [0; 2];
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let num = |i: usize| {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| format_err(path, format!("bad number in column {i}")))
        };
        stage_costs.push([num(cost_cols[0])?, num(cost_cols[1])?]);
        for p in 0..2 {
            if rec.get(fb_cols[p]) != Some(FallbackLevel::None.name()) {
                fallback_steps[p] += 1;
            }
        }
    }
    let mut total_costs = [0.0; 2];
    for c in &stage_costs {
        total_costs[0] += c[0];
        total_costs[1] += c[1];
    }
    Ok(StoredTrace {
        summary: TraceSummary {
            pair: cell,
            seed,
            steps_completed: stage_costs.len().min(horizon),
            termination,
            total_costs,
            fallback_steps,
        },
        stage_costs,
    })
}

/// Writes the per-trace summaries and, when every canonical cell is
/// present, the tables. `cells` lists `(condition, summary)` per cell.
pub fn write_results(
    dir: &Path,
    manifest: &Manifest,
    cells: &BTreeMap<CompetitionType, Vec<(usize, TraceSummary)>>,
) -> Result<StudyResults, StudyError> {
    let path = dir.join("summaries.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for (cell, list) in cells {
        for (k, s) in list {
            w.serialize(SummaryRow {
                cell: cell.label(),
                condition: *k,
                seed: s.seed,
                steps_completed: s.steps_completed,
                termination: s.termination.clone(),
                p1_cost: s.total_costs[0],
                p2_cost: s.total_costs[1],
                p1_fallback_steps: s.fallback_steps[0],
                p2_fallback_steps: s.fallback_steps[1],
            })
            .map_err(csv_err(&path))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| format_err(&path, e.to_string()))?;
    write_atomic(&path, &bytes)?;
    let m = dir.join("manifest.toml");
    write_atomic(&m, toml::to_string_pretty(manifest).expect("manifest serializes").as_bytes())?;
    let summaries = cells
        .iter()
        .map(|(c, list)| (*c, list.iter().map(|(_, s)| s.clone()).collect()))
        .collect();
    let results = StudyResults::from_summaries(summaries)?;
    write_atomic(&dir.join("summary.txt"), summarize(&results).as_bytes())?;
    Ok(results)
}

/// Progress of a persisted study run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
    pub reused: usize,
}

/// Runs a study into `dir`, reusing trace files already there. Conditions are
/// processed in order, all cells of one condition before the next, so an
/// interrupted run leaves whole conditions behind. Fails with `Incomplete`
/// after writing the summaries when `cells` omits a canonical cell.
pub fn run_persisted(
    dir: &Path,
    manifest: &Manifest,
    conditions: &[InitialCondition],
    cells: &[CompetitionType],
    settings: &SimSettings,
    workers: usize,
    progress: &(dyn Fn(Progress, Option<(&SimTrace, usize)>) + Sync),
) -> Result<StudyResults, StudyError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_conditions(dir, conditions)?;
    let m = dir.join("manifest.toml");
    write_atomic(&m, toml::to_string_pretty(manifest).expect("manifest serializes").as_bytes())?;

    let jobs: Vec<(CompetitionType, &InitialCondition)> =
        conditions.iter().flat_map(|ic| cells.iter().map(move |&c| (c, ic))).collect();
    let pending: Vec<&(CompetitionType, &InitialCondition)> =
        jobs.iter().filter(|(c, ic)| !trace_path(dir, *c, ic.index).exists()).collect();
    let reused = jobs.len() - pending.len();
    let done = std::sync::atomic::AtomicUsize::new(reused);
    let total = jobs.len();
    progress(Progress { done: reused, total, reused }, None);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| StudyError::Pool(e.to_string()))?;
    pool.install(|| {
        pending.par_iter().with_max_len(1).try_for_each(|(cell, ic)| {
            let t = simulate(ic.states(), *cell, settings, manifest.horizon_steps, ic.seed);
            write_trace(dir, ic.index, &t)?;
            let d = done.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
            progress(Progress { done: d, total, reused }, Some((&t, ic.index)));
            Ok::<(), StudyError>(())
        })
    })?;

    let mut summaries: BTreeMap<CompetitionType, Vec<(usize, TraceSummary)>> = BTreeMap::new();
    for (cell, ic) in &jobs {
        let stored = read_trace(&trace_path(dir, *cell, ic.index), *cell)?;
        summaries.entry(*cell).or_default().push((ic.index, stored.summary));
    }
    write_results(dir, manifest, &summaries)
}

/// Everything a report needs, read back from a results directory.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedStudy {
    pub manifest: Manifest,
    pub results: StudyResults,
    /// Per-trace stage costs, in condition order.
    pub stage_costs: BTreeMap<CompetitionType, Vec<Vec<[f64; 2]>>>,
}

pub fn load_results(dir: &Path) -> Result<LoadedStudy, StudyError> {
    let m = dir.join("manifest.toml");
    if !m.exists() {
        return Err(StudyError::Incomplete(format!("{} is missing", m.display())));
    }
    let text = fs::read_to_string(&m).map_err(io_err(&m))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| format_err(&m, e.to_string()))?;
    let path = dir.join("summaries.csv");
    if !path.exists() {
        return Err(StudyError::Incomplete(format!("{} is missing", path.display())));
    }
    let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    let mut cells: BTreeMap<CompetitionType, Vec<TraceSummary>> = BTreeMap::new();
    let mut stage_costs: BTreeMap<CompetitionType, Vec<Vec<[f64; 2]>>> = BTreeMap::new();
    for row in r.deserialize::<SummaryRow>() {
        let row = row.map_err(csv_err(&path))?;
        let cell: CompetitionType = row.cell.parse().map_err(|message: String| format_err(&path, message))?;
        let tp = trace_path(dir, cell, row.condition);
        if !tp.exists() {
            return Err(StudyError::Incomplete(format!("{} is missing", tp.display())));
        }
        stage_costs.entry(cell).or_default().push(read_trace(&tp, cell)?.stage_costs);
        cells.entry(cell).or_default().push(TraceSummary {
            pair: cell,
            seed: row.seed,
            steps_completed: row.steps_completed,
            termination: row.termination,
            total_costs: [row.p1_cost, row.p2_cost],
            fallback_steps: [row.p1_fallback_steps, row.p2_fallback_steps],
        });
    }
    for c in CompetitionType::canonical_cells() {
        let have = cells.get(&c).map(Vec::len).unwrap_or(0);
        if have != manifest.n_conditions {
            return Err(StudyError::Incomplete(format!(
                "cell {c} has {have} traces, manifest expects {}",
                manifest.n_conditions
            )));
        }
    }
    let results = StudyResults::from_summaries(cells)?;
    Ok(LoadedStudy { manifest, results, stage_costs })
}

/// Loads the conditions whose traces exist for every canonical cell,
/// ignoring `summaries.csv`. Usable while a study is still running.
pub fn load_completed(dir: &Path) -> Result<LoadedStudy, StudyError> {
    let m = dir.join("manifest.toml");
    let text = fs::read_to_string(&m).map_err(io_err(&m))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| format_err(&m, e.to_string()))?;
    let canonical = CompetitionType::canonical_cells();
    let mut cells: BTreeMap<CompetitionType, Vec<TraceSummary>> = BTreeMap::new();
    let mut stage_costs: BTreeMap<CompetitionType, Vec<Vec<[f64; 2]>>> = BTreeMap::new();
    for k in 0..manifest.n_conditions {
        if !canonical.iter().all(|&c| trace_path(dir, c, k).exists()) {
            continue;
        }
        for &c in &canonical {
            let stored = read_trace(&trace_path(dir, c, k), c)?;
            cells.entry(c).or_default().push(stored.summary);
            stage_costs.entry(c).or_default().push(stored.stage_costs);
        }
    }
    if cells.is_empty() {
        return Err(StudyError::Incomplete(format!("no condition in {} has all ten cells", dir.display())));
    }
    let results = StudyResults::from_summaries(cells)?;
    Ok(LoadedStudy { manifest, results, stage_costs })
}
