//! `stackrace`: solve, simulate, study and report.

mod report;
mod scenario;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use stackrace::bilevel::{solve_best_response, solve_bilevel};
use stackrace::config::{self, Config};
use stackrace::mcp::{Matrix, Vector};
use stackrace::nash::solve_nash;
use stackrace::problems::{PlayerProblem, TwoPlayerGame};
use stackrace::racing::{build_game, horizon_stage_costs, DynamicsMode, Scenario};
use stackrace::sim::{clamp_control, plan, plan_checks, simulate, CompetitionType, FallbackLevel, SimSettings, StrategyKind};
use stackrace::study::{self, Manifest, StudyError, COST_ACCOUNTING};

use scenario::{GameKind, ScenarioFile};

const EXIT_FAILURE: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;
const EXIT_INCOMPLETE: u8 = 4;

#[derive(Parser)]
#[command(name = "stackrace", version = config::version(), about = "Nash and bilevel racing games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_dynamics)]
    dynamics: Option<DynamicsMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one planning problem per player and print diagnostics.
    Solve {
        scenario: PathBuf,
        /// Strategy pair such as `N-L`; overrides the scenario file.
        #[arg(long)]
        pair: Option<CompetitionType>,
        #[command(flatten)]
        common: Common,
    },
    /// Play one race and write its trace.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        pair: Option<CompetitionType>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "simulation")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the competition study, resuming any traces already written.
    Study {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated canonical cells, e.g. `S-S,L-L`.
        #[arg(long, value_parser = parse_cells)]
        cells: Option<CellList>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Write tables, curves and plots for a results directory.
    Report {
        results: PathBuf,
        /// Report directory; `<results>/report` when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use every condition with all ten cells on disk, e.g. while a study runs.
        #[arg(long)]
        completed: bool,
    },
}

fn parse_dynamics(s: &str) -> Result<DynamicsMode, String> {
    s.parse()
}

#[derive(Debug, Clone)]
struct CellList(Vec<CompetitionType>);

fn parse_cells(s: &str) -> Result<CellList, String> {
    let mut cells: Vec<CompetitionType> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let c = part.parse::<CompetitionType>()?.canonical();
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    if cells.is_empty() {
        return Err("no cells given".into());
    }
    cells.sort();
    Ok(CellList(cells))
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

type Outcome = Result<(), Failure>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::new(EXIT_FAILURE, format!("{}: {e}", path.display()))
}

fn load_config(common: &Common) -> Result<Config, Failure> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path).map_err(|e| match e {
            config::ConfigError::Io { .. } => Failure::new(EXIT_FAILURE, e.to_string()),
            _ => Failure::new(EXIT_PARSE, e.to_string()),
        })?,
        None => Config::default(),
    };
    if let Some(d) = common.dynamics {
        cfg.race.dynamics_mode = d;
    }
    Ok(cfg)
}

fn settings(cfg: &Config) -> Result<SimSettings, Failure> {
    cfg.sim_settings().map_err(|e| Failure::new(EXIT_PARSE, e.to_string()))
}

fn read_scenario(path: &Path) -> Result<ScenarioFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    scenario::parse(&text).map_err(|e| Failure::new(EXIT_PARSE, format!("{}: {e}", path.display())))
}

fn pair_of(flag: Option<CompetitionType>, file: &ScenarioFile) -> Result<CompetitionType, Failure> {
    flag.or(file.pair)
        .ok_or_else(|| Failure::new(EXIT_PARSE, "no strategy pair: pass --pair or set `pair` in the scenario"))
}

fn write(path: &Path, contents: &str) -> Outcome {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io(parent))?;
    }
    std::fs::write(path, contents).map_err(io(path))
}

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

/// Solves the two-variable leader/follower toy from P1's strategy.
fn solve_toy(strategy: StrategyKind, s: &SimSettings) -> Outcome {
    let game = stackelberg_toy();
    let x0 = Vector::zeros(2);
    let x = match strategy {
        StrategyKind::SinglePlayer => solve_best_response(&game, 0, &x0, None, &s.solver)
            .map(|r| r.x)
            .map_err(|e| e.to_string()),
        StrategyKind::Nash => solve_nash(&game, &x0, None, &s.solver).map(|r| r.x).map_err(|e| e.to_string()),
        StrategyKind::Leader | StrategyKind::Follower => {
            let leader = usize::from(strategy == StrategyKind::Follower);
            match solve_bilevel(&game, leader, &x0, None, &s.bilevel) {
                Ok(r) if r.is_equilibrium() => {
                    println!("bilevel: {:?}, {} pieces checked, {} outer iterations", r.status, r.pieces_checked, r.outer_iterations);
                    Ok(r.x)
                }
                Ok(r) => Err(format!("bilevel solve ended with {:?}", r.status)),
                Err(e) => Err(e.to_string()),
            }
        }
    };
    let x = x.map_err(|m| Failure::new(EXIT_NO_CONVERGENCE, m))?;
    println!("strategy: {strategy:?}");
    println!("x: [{:.9}, {:.9}]", x[0], x[1]);
    println!("leader cost: {:.9}", game.player(0).cost(&x));
    println!("follower cost: {:.9}", game.player(1).cost(&x));
    Ok(())
}

fn cmd_solve(path: &Path, pair: Option<CompetitionType>, common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let s = settings(&cfg)?;
    let file = read_scenario(path)?;
    let pair = pair_of(pair, &file)?;
    if file.game == GameKind::StackelbergToy {
        return solve_toy(pair.p1, &s);
    }
    let states = file.states.expect("racing scenarios carry states");
    let mut failed = false;
    let mut out = String::new();
    let _ = writeln!(out, "pair: {pair}");
    for (i, strategy) in [pair.p1, pair.p2].into_iter().enumerate() {
        let own = [states[i], states[1 - i]];
        let scenario = Scenario::new(&s.track, own, &s.params)
            .and_then(|sc| sc.check_start().map(|_| sc))
            .map_err(|e| Failure::new(EXIT_FAILURE, format!("P{}: {e}", i + 1)))?;
        let t = Instant::now();
        let p = plan(strategy, &scenario, None, &s);
        let elapsed = t.elapsed().as_secs_f64();
        failed |= p.fallback != FallbackLevel::None;
        let _ = writeln!(out, "P{} ({strategy:?}): plan from {} rung in {elapsed:.2}s", i + 1, p.fallback.name());
        if let Some(w) = &p.warm {
            let game = build_game(&scenario).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
            let solved = if p.fallback == FallbackLevel::SinglePlayer { StrategyKind::SinglePlayer } else { strategy };
            for check in plan_checks(solved, &game, w) {
                let c = check.certificate;
                let who = if check.player == 0 { "ego" } else { "opponent" };
                if check.stationary {
                    let _ = writeln!(
                        out,
                        "  KKT ({who}): stationarity {:.2e}, min constraint {:.2e}, min dual {:.2e}, complementarity {:.2e}",
                        c.stationarity, c.min_feasibility, c.min_dual, c.max_complementarity
                    );
                } else {
                    let _ = writeln!(out, "  feasibility ({who}, leader): min constraint {:.2e}", c.min_feasibility);
                }
            }
            let costs = horizon_stage_costs(&scenario, 0, &w.x);
            let _ = writeln!(
                out,
                "  planned stage costs: first {:.6e}, horizon total {:.6e}",
                costs.first().copied().unwrap_or(0.0),
                costs.iter().sum::<f64>()
            );
        }
        let u = clamp_control(&p.controls[0], &own[0], &own[1], &s.params);
        let _ = writeln!(out, "  first control: tau {:.9}, omega {:.9}", u.tau, u.omega);
    }
    print!("{out}");
    if failed {
        return Err(Failure::new(EXIT_NO_CONVERGENCE, "a primary solver did not converge; fallback plan shown"));
    }
    Ok(())
}

fn run_metadata(seed: u64) -> String {
    format!("version = \"{}\"\nseed = {seed}\n", config::version())
}

fn cmd_simulate(path: &Path, pair: Option<CompetitionType>, seed: Option<u64>, out: &Path, common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let s = settings(&cfg)?;
    let file = read_scenario(path)?;
    if file.game != GameKind::Racing {
        return Err(Failure::new(EXIT_PARSE, "simulate needs a racing scenario"));
    }
    let pair = pair_of(pair, &file)?;
    let states = file.states.expect("racing scenarios carry states");
    let seed = seed.unwrap_or(cfg.study.master_seed);
    let trace = simulate(states, pair, &s, cfg.study.horizon_steps, seed);
    let summary = trace.summary();
    let mut text = format!(
        "# termination={} seed={} horizon_steps={}\n",
        trace.termination.name(),
        seed,
        trace.horizon_steps
    );
    text.push_str(&trace.to_records());
    write(&out.join("trace.csv"), &text)?;
    let summary_text = format!(
        "pair = \"{}\"\nseed = {}\nsteps_completed = {}\ntermination = {:?}\n{}p1_total_cost = {:?}\np2_total_cost = {:?}\np1_fallback_steps = {}\np2_fallback_steps = {}\n",
        pair.label(),
        seed,
        summary.steps_completed,
        summary.termination,
        match trace.termination {
            stackrace::sim::Termination::Completed => String::new(),
            stackrace::sim::Termination::Collision { step } | stackrace::sim::Termination::TrackViolation { step, .. } => {
                format!("termination_step = {step}\n")
            }
        },
        summary.total_costs[0],
        summary.total_costs[1],
        summary.fallback_steps[0],
        summary.fallback_steps[1],
    );
    write(&out.join("summary.toml"), &summary_text)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    write(&out.join("run.toml"), &run_metadata(seed))?;
    print!("{summary_text}");
    Ok(())
}

fn cmd_study(
    seed: Option<u64>,
    out: Option<PathBuf>,
    cells: Option<Vec<CompetitionType>>,
    workers: Option<usize>,
    common: &Common,
) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(seed) = seed {
        cfg.study.master_seed = seed;
    }
    if let Some(w) = workers {
        cfg.study.workers = w;
    }
    if let Some(o) = out {
        cfg.study.output_dir = o;
    }
    let s = settings(&cfg)?;
    let dir = cfg.study.output_dir.clone();
    let cells = cells.unwrap_or_else(CompetitionType::canonical_cells);

    let resolved = cfg.to_toml();
    let cfg_path = dir.join("config.toml");
    if cfg_path.exists() {
        let existing = std::fs::read_to_string(&cfg_path).map_err(io(&cfg_path))?;
        if existing != resolved {
            return Err(Failure::new(
                EXIT_FAILURE,
                format!("{} holds a different configuration; choose another --out", dir.display()),
            ));
        }
    }
    write(&cfg_path, &resolved)?;

    let conditions = study::sample_initial_conditions(cfg.study.n_conditions, &s.params, &s.track, cfg.study.master_seed)
        .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    let manifest = Manifest {
        version: config::version().to_string(),
        master_seed: cfg.study.master_seed,
        n_conditions: cfg.study.n_conditions,
        horizon_steps: cfg.study.horizon_steps,
        cells: cells.iter().map(|c| c.label()).collect(),
        cost_accounting: COST_ACCOUNTING.to_string(),
    };
    let start = Instant::now();
    let progress = |p: study::Progress, t: Option<(&stackrace::sim::SimTrace, usize)>| match t {
        None if p.reused > 0 => eprintln!("reusing {} of {} traces", p.reused, p.total),
        None => {}
        Some((trace, k)) => eprintln!(
            "[{}/{}] {} condition {k}: {} after {} steps ({:.0}s elapsed)",
            p.done,
            p.total,
            trace.pair,
            trace.termination.name(),
            trace.steps_completed(),
            start.elapsed().as_secs_f64()
        ),
    };
    match study::run_persisted(&dir, &manifest, &conditions, &cells, &s, cfg.study.workers, &progress) {
        Ok(results) => {
            print!("{}", study::summarize(&results));
            eprintln!("results written to {}", dir.display());
            Ok(())
        }
        Err(StudyError::Incomplete(m)) => {
            eprintln!("traces written to {}; tables need all ten cells ({m})", dir.display());
            Ok(())
        }
        Err(e) => Err(Failure::new(EXIT_FAILURE, e.to_string())),
    }
}

fn cmd_report(results: &Path, out: Option<PathBuf>, completed: bool) -> Outcome {
    let load = if completed { study::load_completed } else { study::load_results };
    let loaded = load(results).map_err(|e| match e {
        StudyError::Incomplete(_) => Failure::new(EXIT_INCOMPLETE, e.to_string()),
        _ => Failure::new(EXIT_FAILURE, e.to_string()),
    })?;
    let dir = out.unwrap_or_else(|| results.join("report"));
    for f in report::build(&loaded) {
        write(&dir.join(&f.name), &f.contents)?;
    }
    print!("{}", study::summarize(&loaded.results));
    eprintln!("report written to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve { scenario, pair, common } => cmd_solve(&scenario, pair, &common),
        Command::Simulate { scenario, pair, seed, out, common } => cmd_simulate(&scenario, pair, seed, &out, &common),
        Command::Study { seed, out, cells, workers, common } => cmd_study(seed, out, cells.map(|c| c.0), workers, &common),
        Command::Report { results, out, completed } => cmd_report(&results, out, completed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
