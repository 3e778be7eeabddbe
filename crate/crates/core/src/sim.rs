//! Receding-horizon play between two strategies.
//!
//! Each player plans in its own frame: the game is built with the planning
//! player as player 0, so exchanging labels reproduces a player's plan bit
//! for bit. Only the first control of every plan is executed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bilevel::{solve_best_response, solve_bilevel, BilevelOptions};
use crate::mcp::{SolverOptions, Vector};
use crate::nash::{kkt_certificate, solve_nash, KktCertificate};
use crate::problems::TwoPlayerGame;
use crate::racing::{
    build_game, decode_block, draft_limit, encode_block, extrapolate_constant_velocity, rollout,
    shift_block, shift_duals, stage_cost, step_dynamics, Arc, Control, CraftState, DynamicsMode, RaceParams,
    Scenario, TrackLayout,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    SinglePlayer,
    Nash,
    Leader,
    Follower,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [Self::SinglePlayer, Self::Nash, Self::Leader, Self::Follower];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            Self::SinglePlayer => 'S',
            Self::Nash => 'N',
            Self::Leader => 'L',
            Self::Follower => 'F',
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s" | "single" | "single-player" | "singleplayer" => Ok(Self::SinglePlayer),
            "n" | "nash" => Ok(Self::Nash),
            "l" | "leader" => Ok(Self::Leader),
            "f" | "follower" => Ok(Self::Follower),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Strategies of P1 and P2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CompetitionType {
    pub p1: StrategyKind,
    pub p2: StrategyKind,
}

impl CompetitionType {
    pub fn new(p1: StrategyKind, p2: StrategyKind) -> Self {
        Self { p1, p2 }
    }

    pub fn swapped(self) -> Self {
        Self { p1: self.p2, p2: self.p1 }
    }

    /// The simulated representative of this pair, with `p1 ≤ p2` in
    /// strategy order.
    pub fn is_canonical(self) -> bool {
        self.p1.index() <= self.p2.index()
    }

    pub fn canonical(self) -> Self {
        if self.is_canonical() {
            self
        } else {
            self.swapped()
        }
    }

    pub fn all() -> Vec<Self> {
        let mut v = Vec::with_capacity(16);
        for p1 in StrategyKind::ALL {
            for p2 in StrategyKind::ALL {
                v.push(Self::new(p1, p2));
            }
        }
        v
    }

    pub fn canonical_cells() -> Vec<Self> {
        Self::all().into_iter().filter(|c| c.is_canonical()).collect()
    }

    pub fn label(self) -> String {
        format!("{}-{}", self.p1.letter(), self.p2.letter())
    }
}

impl fmt::Display for CompetitionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for CompetitionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(['-', ',', '/']).collect();
        match parts.as_slice() {
            [a, b] => Ok(Self::new(a.parse()?, b.parse()?)),
            _ => Err(format!("expected a pair like `L-F`, got `{s}`")),
        }
    }
}

/// Which rung of the fallback chain produced a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackLevel {
    /// The strategy's own solve, from its usual initialization.
    None,
    /// Bilevel solve initialized from the single-player plan.
    SinglePlayerInit,
    /// Single-player plan in place of a failed equilibrium.
    SinglePlayer,
    /// Zero controls.
    Uncontrolled,
}

impl FallbackLevel {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::SinglePlayerInit => "single-player-init",
            Self::SinglePlayer => "single-player",
            Self::Uncontrolled => "uncontrolled",
        }
    }
}

/// Solution data carried to the next step, in the planner's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: Vector,
    pub duals: [Option<Vector>; 2],
}

impl WarmStart {
    /// Advance by one step: drop the first stage and repeat the last.
    pub fn shifted(&self, n_t: usize) -> Self {
        let b = 6 * n_t;
        let mut x = self.x.clone();
        for p in 0..2 {
            let block = self.x.rows(p * b, b).into_owned();
            x.rows_mut(p * b, b).copy_from(&shift_block(&block, n_t));
        }
        Self {
            x,
            duals: [0, 1].map(|p| self.duals[p].as_ref().map(|d| shift_duals(d, n_t))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub controls: Vec<Control>,
    pub fallback: FallbackLevel,
    /// The primary rung needed a cold restart after the warm start failed.
    pub cold_restart: bool,
    pub warm: Option<WarmStart>,
}

/// Everything a simulation needs besides the initial states.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub params: RaceParams,
    pub track: TrackLayout,
    pub solver: SolverOptions,
    pub bilevel: BilevelOptions,
}

impl SimSettings {
    pub fn new(params: RaceParams, track: TrackLayout) -> Self {
        let solver = SolverOptions::default();
        let bilevel = BilevelOptions {
            mcp: solver.clone(),
            ..BilevelOptions::default()
        };
        Self { params, track, solver, bilevel }
    }
}

/// Control that holds the current speed, within the nominal bounds.
fn cruise_control(state: &CraftState, params: &RaceParams) -> Control {
    let tau = match params.dynamics_mode {
        DynamicsMode::Integrated => params.c_drag * state.v,
        DynamicsMode::Direct => (1.0 + params.c_drag) * state.v,
    };
    Control::new(tau.clamp(params.tau_min, params.tau_nom_max), 0.0)
}

fn cruise_block(state: &CraftState, params: &RaceParams) -> Vector {
    let controls = vec![cruise_control(state, params); params.n_t];
    encode_block(&rollout(state, &controls, params), &controls)
}

fn extrapolated_block(state: &CraftState, params: &RaceParams) -> Vector {
    let controls = vec![cruise_control(state, params); params.n_t];
    encode_block(&extrapolate_constant_velocity(state, params.n_t, params), &controls)
}

fn cold_guess(scenario: &Scenario) -> Vector {
    let p = &scenario.params;
    let b = 6 * p.n_t;
    let mut x = Vector::zeros(2 * b);
    x.rows_mut(0, b).copy_from(&cruise_block(&scenario.states[0], p));
    x.rows_mut(b, b).copy_from(&cruise_block(&scenario.states[1], p));
    x
}

fn with_blocks(ego: &Vector, opp: &Vector) -> Vector {
    let b = ego.len();
    let mut x = Vector::zeros(2 * b);
    x.rows_mut(0, b).copy_from(ego);
    x.rows_mut(b, b).copy_from(opp);
    x
}

struct Planner<'a> {
    game: &'a TwoPlayerGame,
    scenario: &'a Scenario,
    settings: &'a SimSettings,
    warm: Option<&'a WarmStart>,
}

impl Planner<'_> {
    fn n_t(&self) -> usize {
        self.scenario.params.n_t
    }

    fn starts(&self) -> Vec<(Vector, Option<[Vector; 2]>, bool)> {
        let mut out = Vec::with_capacity(2);
        if let Some(w) = self.warm {
            let duals = match &w.duals {
                [Some(a), Some(b)] => Some([a.clone(), b.clone()]),
                _ => None,
            };
            out.push((w.x.clone(), duals, false));
        }
        out.push((cold_guess(self.scenario), None, self.warm.is_some()));
        out
    }

    fn single_player(&self) -> Option<(WarmStart, bool)> {
        let b = 6 * self.n_t();
        let opp = extrapolated_block(&self.scenario.states[1], &self.scenario.params);
        for (x, _, cold) in self.starts() {
            let x0 = with_blocks(&x.rows(0, b).into_owned(), &opp);
            let d0 = self.warm.filter(|_| !cold).and_then(|w| w.duals[0].clone());
            if let Ok(sol) = solve_best_response(self.game, 0, &x0, d0.as_ref(), &self.settings.solver) {
                return Some((WarmStart { x: sol.x, duals: [Some(sol.duals), None] }, cold));
            }
        }
        None
    }

    fn nash(&self) -> Option<(WarmStart, bool)> {
        for (x0, duals, cold) in self.starts() {
            if let Ok(sol) = solve_nash(self.game, &x0, duals.as_ref(), &self.settings.solver) {
                let [a, b] = sol.duals;
                return Some((WarmStart { x: sol.x, duals: [Some(a), Some(b)] }, cold));
            }
        }
        None
    }

    fn bilevel(&self, leader: usize, init: &WarmStart) -> Option<WarmStart> {
        let follower = 1 - leader;
        let res = solve_bilevel(self.game, leader, &init.x, init.duals[follower].as_ref(), &self.settings.bilevel).ok()?;
        if !res.is_equilibrium() {
            return None;
        }
        let mut duals = [None, None];
        duals[leader] = Some(res.leader_duals);
        duals[follower] = Some(res.follower_duals);
        Some(WarmStart { x: res.x, duals })
    }

    fn plan(&self, strategy: StrategyKind) -> (Option<WarmStart>, FallbackLevel, bool) {
        match strategy {
            StrategyKind::SinglePlayer => match self.single_player() {
                Some((w, cold)) => (Some(w), FallbackLevel::None, cold),
                None => (None, FallbackLevel::Uncontrolled, false),
            },
            StrategyKind::Nash => {
                if let Some((w, cold)) = self.nash() {
                    return (Some(w), FallbackLevel::None, cold);
                }
                match self.single_player() {
                    Some((w, _)) => (Some(w), FallbackLevel::SinglePlayer, false),
                    None => (None, FallbackLevel::Uncontrolled, false),
                }
            }
            StrategyKind::Leader | StrategyKind::Follower => {
                let leader = if strategy == StrategyKind::Leader { 0 } else { 1 };
                if let Some((init, cold)) = self.nash() {
                    if let Some(w) = self.bilevel(leader, &init) {
                        return (Some(w), FallbackLevel::None, cold);
                    }
                }
                if let Some((sp, _)) = self.single_player() {
                    if let Some(w) = self.bilevel(leader, &sp) {
                        return (Some(w), FallbackLevel::SinglePlayerInit, false);
                    }
                }
                (None, FallbackLevel::Uncontrolled, false)
            }
        }
    }
}

/// Plans for player 0 of `scenario` under `strategy`. Never fails: the last
/// rung of the fallback chain is zero controls.
pub fn plan(strategy: StrategyKind, scenario: &Scenario, warm: Option<&WarmStart>, settings: &SimSettings) -> Plan {
    let n_t = scenario.params.n_t;
    let uncontrolled = || Plan {
        controls: vec![Control::ZERO; n_t],
        fallback: FallbackLevel::Uncontrolled,
        cold_restart: false,
        warm: None,
    };
    let Ok(game) = build_game(scenario) else {
        return uncontrolled();
    };
    let warm = warm.filter(|w| w.x.len() == game.n_total());
    let planner = Planner { game: &game, scenario, settings, warm };
    match planner.plan(strategy) {
        (Some(w), fallback, cold_restart) => {
            let (_, controls) = decode_block(&w.x.rows(0, 6 * n_t).into_owned(), n_t);
            Plan { controls, fallback, cold_restart, warm: Some(w) }
        }
        _ => uncontrolled(),
    }
}

/// Clamp a control into its box at the current positions.
pub fn clamp_control(u: &Control, ego: &CraftState, opp: &CraftState, params: &RaceParams) -> Control {
    let tau_max = draft_limit(ego.position(), opp.position(), params);
    Control::new(
        u.tau.clamp(params.tau_min, tau_max),
        u.omega.clamp(-params.omega_max, params.omega_max),
    )
}

/// First-order check of one player at a planned point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanCheck {
    pub player: usize,
    pub certificate: KktCertificate,
    /// False for a bilevel leader, whose point is only checked for feasibility.
    pub stationary: bool,
}

impl PlanCheck {
    pub fn passes(&self, tol: f64) -> bool {
        if self.stationary {
            self.certificate.passes(tol)
        } else {
            self.certificate.min_feasibility >= -tol
        }
    }
}

/// Checks for a plan that `strategy` produced without fallback, with the ego
/// as player 0 of `game`. Every player solving a single-level problem gets a
/// KKT certificate; a leader gets a feasibility check.
pub fn plan_checks(strategy: StrategyKind, game: &TwoPlayerGame, warm: &WarmStart) -> Vec<PlanCheck> {
    let roles: &[(usize, bool)] = match strategy {
        StrategyKind::SinglePlayer => &[(0, true)],
        StrategyKind::Nash => &[(0, true), (1, true)],
        StrategyKind::Leader => &[(0, false), (1, true)],
        StrategyKind::Follower => &[(0, true), (1, false)],
    };
    roles
        .iter()
        .filter_map(|&(player, stationary)| {
            let duals = if stationary {
                warm.duals[player].clone()?
            } else {
                Vector::zeros(game.player(player).constraints(&warm.x).len())
            };
            let certificate = kkt_certificate(game, player, &warm.x, &duals);
            Some(PlanCheck { player, certificate, stationary })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanInfo {
    pub fallback: FallbackLevel,
    pub cold_restart: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// States at the start of the step.
    pub states: [CraftState; 2],
    /// Arcs fitted at the start of the step, used for the stage costs.
    pub arcs: [Arc; 2],
    pub controls: [Control; 2],
    pub plans: [PlanInfo; 2],
    pub stage_costs: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Termination {
    Completed,
    Collision { step: usize },
    TrackViolation { step: usize, players: [bool; 2] },
}

impl Termination {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Completed => "completed",
            Self::Collision { .. } => "collision",
            Self::TrackViolation { .. } => "track-violation",
        }
    }

    fn mirrored(self) -> Self {
        match self {
            Self::TrackViolation { step, players: [a, b] } => Self::TrackViolation { step, players: [b, a] },
            t => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub pair: CompetitionType,
    pub seed: u64,
    pub horizon_steps: usize,
    pub initial: [CraftState; 2],
    pub steps: Vec<StepRecord>,
    pub final_states: [CraftState; 2],
    pub termination: Termination,
}

/// Compact per-trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub pair: CompetitionType,
    pub seed: u64,
    pub steps_completed: usize,
    pub termination: String,
    pub total_costs: [f64; 2],
    /// Steps per player that used any fallback rung.
    pub fallback_steps: [usize; 2],
}

impl SimTrace {
    /// Robustness metric: completed steps before termination.
    pub fn steps_completed(&self) -> usize {
        self.steps.len().min(self.horizon_steps)
    }

    pub fn total_costs(&self) -> [f64; 2] {
        let mut c = [0.0; 2];
        for s in &self.steps {
            c[0] += s.stage_costs[0];
            c[1] += s.stage_costs[1];
        }
        c
    }

    pub fn summary(&self) -> TraceSummary {
        let count = |p: usize| self.steps.iter().filter(|s| s.plans[p].fallback != FallbackLevel::None).count();
        TraceSummary {
            pair: self.pair,
            seed: self.seed,
            steps_completed: self.steps_completed(),
            termination: self.termination.name().to_string(),
            total_costs: self.total_costs(),
            fallback_steps: [count(0), count(1)],
        }
    }

    /// The same trace with player labels exchanged.
    pub fn mirrored(&self) -> Self {
        let sw = |a: [CraftState; 2]| [a[1], a[0]];
        Self {
            pair: self.pair.swapped(),
            seed: self.seed,
            horizon_steps: self.horizon_steps,
            initial: sw(self.initial),
            steps: self
                .steps
                .iter()
                .map(|s| StepRecord {
                    step: s.step,
                    states: sw(s.states),
                    arcs: [s.arcs[1], s.arcs[0]],
                    controls: [s.controls[1], s.controls[0]],
                    plans: [s.plans[1], s.plans[0]],
                    stage_costs: [s.stage_costs[1], s.stage_costs[0]],
                })
                .collect(),
            final_states: sw(self.final_states),
            termination: self.termination.mirrored(),
        }
    }

    pub const RECORD_HEADER: &'static str = "step,p1_lat,p1_long,p1_v,p1_theta,p2_lat,p2_long,p2_v,p2_theta,\
p1_tau,p1_omega,p2_tau,p2_omega,p1_cost,p2_cost,p1_fallback,p2_fallback,p1_cold,p2_cold";

    /// One line per executed step, preceded by a header.
    pub fn to_records(&self) -> String {
        let mut out = String::from(Self::RECORD_HEADER);
        out.push('\n');
        for s in &self.steps {
            let mut fields = vec![s.step.to_string()];
            for st in &s.states {
                fields.extend(st.as_array().iter().map(|v| format!("{v:?}")));
            }
            for u in &s.controls {
                fields.push(format!("{:?}", u.tau));
                fields.push(format!("{:?}", u.omega));
            }
            fields.extend(s.stage_costs.iter().map(|v| format!("{v:?}")));
            fields.extend(s.plans.iter().map(|p| p.fallback.name().to_string()));
            fields.extend(s.plans.iter().map(|p| u8::from(p.cold_restart).to_string()));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Stage costs recomputed from the stored states, arcs and controls.
    pub fn recomputed_costs(&self, params: &RaceParams) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.steps.len());
        for (k, s) in self.steps.iter().enumerate() {
            let next = self.steps.get(k + 1).map(|n| n.states).unwrap_or(self.final_states);
            out.push([0, 1].map(|i| stage_cost(&next[i], &next[1 - i], &s.controls[i], &s.arcs[i], params)));
        }
        out
    }
}

/// Why a joint state is not admissible, if it is not.
pub fn check_state(states: &[CraftState; 2], track: &TrackLayout, params: &RaceParams) -> Option<(bool, [bool; 2])> {
    let [p, q] = [states[0].position(), states[1].position()];
    let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    if !(d >= params.r_col) {
        return Some((true, [false; 2]));
    }
    let off = [0, 1].map(|i| {
        !states[i].is_finite()
            || !track
                .fit_arc(states[i].position())
                .map(|a| a.contains(states[i].position(), params.w_track))
                .unwrap_or(false)
    });
    if off[0] || off[1] {
        Some((false, off))
    } else {
        None
    }
}

/// Plays `pair` from `init` for up to `horizon_steps` steps.
pub fn simulate(
    init: [CraftState; 2],
    pair: CompetitionType,
    settings: &SimSettings,
    horizon_steps: usize,
    seed: u64,
) -> SimTrace {
    let params = &settings.params;
    let strategies = [pair.p1, pair.p2];
    let mut states = init;
    let mut warm: [Option<WarmStart>; 2] = [None, None];
    let mut steps = Vec::new();
    let mut termination = Termination::Completed;

    for k in 0..=horizon_steps {
        if let Some((collision, players)) = check_state(&states, &settings.track, params) {
            termination = if collision {
                Termination::Collision { step: k }
            } else {
                Termination::TrackViolation { step: k, players }
            };
            break;
        }
        if k == horizon_steps {
            break;
        }
        let ego_plan = |i: usize| {
            let own = [states[i], states[1 - i]];
            let scenario = Scenario::new(&settings.track, own, params).ok()?;
            let w = warm[i].as_ref().map(|w| w.shifted(params.n_t));
            Some((plan(strategies[i], &scenario, w.as_ref(), settings), scenario.arcs[0]))
        };
        let (a, b) = rayon::join(|| ego_plan(0), || ego_plan(1));
        let (Some((plan0, arc0)), Some((plan1, arc1))) = (a, b) else {
            // Unreachable after a passing state check.
            termination = Termination::TrackViolation { step: k, players: [true, true] };
            break;
        };
        let plans = [plan0, plan1];
        let controls = [0, 1].map(|i| {
            clamp_control(&plans[i].controls[0], &states[i], &states[1 - i], params)
        });
        let next = [0, 1].map(|i| step_dynamics(&states[i], &controls[i], params));
        let arcs = [arc0, arc1];
        let stage_costs = [0, 1].map(|i| stage_cost(&next[i], &next[1 - i], &controls[i], &arcs[i], params));
        steps.push(StepRecord {
            step: k,
            states,
            arcs,
            controls,
            plans: [0, 1].map(|i| PlanInfo {
                fallback: plans[i].fallback,
                cold_restart: plans[i].cold_restart,
            }),
            stage_costs,
        });
        let [p0, p1] = plans;
        warm = [p0.warm, p1.warm];
        states = next;
    }

    SimTrace {
        pair,
        seed,
        horizon_steps,
        initial: init,
        steps,
        final_states: states,
        termination,
    }
}
