use serde::{Deserialize, Serialize};

use super::params::{DynamicsMode, RaceParams};
use super::track::Arc;

/// Craft state. `theta` is measured from the longitudinal (down-track) axis,
/// positive toward increasing lateral offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CraftState {
    pub p_lat: f64,
    pub p_long: f64,
    pub v: f64,
    pub theta: f64,
}

impl CraftState {
    pub fn new(p_lat: f64, p_long: f64, v: f64, theta: f64) -> Self {
        Self { p_lat, p_long, v, theta }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.p_lat, self.p_long]
    }

    pub fn v_long(&self) -> f64 {
        self.v * self.theta.cos()
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.p_lat, self.p_long, self.v, self.theta]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Control {
    pub tau: f64,
    pub omega: f64,
}

impl Control {
    pub fn new(tau: f64, omega: f64) -> Self {
        Self { tau, omega }
    }

    pub const ZERO: Control = Control { tau: 0.0, omega: 0.0 };
}

/// Advance one step. Positions use the post-step speed and heading.
pub fn step_dynamics(state: &CraftState, control: &Control, params: &RaceParams) -> CraftState {
    let (v, theta) = match params.dynamics_mode {
        DynamicsMode::Integrated => (
            state.v + params.dt * (control.tau - params.c_drag * state.v),
            state.theta + params.dt * control.omega,
        ),
        DynamicsMode::Direct => (control.tau - params.c_drag * state.v, control.omega),
    };
    CraftState {
        p_lat: state.p_lat + params.dt * v * theta.sin(),
        p_long: state.p_long + params.dt * v * theta.cos(),
        v,
        theta,
    }
}

/// Apply `controls` in order, returning the `controls.len()` successor states.
pub fn rollout(initial: &CraftState, controls: &[Control], params: &RaceParams) -> Vec<CraftState> {
    let mut out = Vec::with_capacity(controls.len());
    let mut s = *initial;
    for u in controls {
        s = step_dynamics(&s, u, params);
        out.push(s);
    }
    out
}

/// Hold speed and heading fixed and move the position.
pub fn extrapolate_constant_velocity(initial: &CraftState, steps: usize, params: &RaceParams) -> Vec<CraftState> {
    let mut out = Vec::with_capacity(steps);
    let mut s = *initial;
    for _ in 0..steps {
        s.p_lat += params.dt * s.v * s.theta.sin();
        s.p_long += params.dt * s.v * s.theta.cos();
        out.push(s);
    }
    out
}

/// Running cost of one player for one step, evaluated at the post-step
/// states of both players and the ego control.
pub fn stage_cost(ego: &CraftState, opp: &CraftState, control: &Control, arc: &Arc, params: &RaceParams) -> f64 {
    let d2 = arc.distance_squared(ego.position());
    let dev = d2 - arc.radius * arc.radius;
    params.alpha1 * params.alpha1 * dev * dev
        + params.alpha2 * (control.tau * control.tau + control.omega * control.omega)
        + params.beta * (opp.v_long() - ego.v_long())
}
