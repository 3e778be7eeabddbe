//! Two-craft racing model: dynamics, track arcs, collision responsibility,
//! drafting and the horizon game.

mod dynamics;
mod game;
mod interaction;
mod params;
mod track;

pub use dynamics::{extrapolate_constant_velocity, rollout, stage_cost, step_dynamics, Control, CraftState};
pub use game::{
    build_game, control_var, decode_block, encode_block, horizon_stage_costs, joint_rollout, shift_block,
    shift_duals, state_var, BuildError, Scenario, EQ_PER_STEP, INEQ_PER_STEP,
};
pub use interaction::{
    collision_constraint, draft_gate, draft_limit, logistic, responsibility, responsibility_p1, DRAFT_ABS_SMOOTHING,
};
pub use params::{DynamicsMode, RaceParams};
pub use track::{circumcircle, Arc, TrackError, TrackLayout};
