use serde::{Deserialize, Serialize};

/// How velocity and heading are advanced between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicsMode {
    /// `v⁺ = v + Δt(τ − c v)`, `θ⁺ = θ + Δt ω`.
    #[default]
    Integrated,
    /// `v⁺ = τ − c v`, `θ⁺ = ω`.
    #[serde(alias = "paper-literal", alias = "paper_literal")]
    Direct,
}

impl std::str::FromStr for DynamicsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "integrated" => Ok(Self::Integrated),
            "direct" | "paper-literal" | "paper_literal" => Ok(Self::Direct),
            other => Err(format!("unknown dynamics mode `{other}`")),
        }
    }
}

impl std::fmt::Display for DynamicsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Integrated => "integrated",
            Self::Direct => "direct",
        })
    }
}

/// Model parameters shared by both craft.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub n_t: usize,
    pub dt: f64,
    pub c_drag: f64,
    pub r_col: f64,
    pub tau_nom_max: f64,
    pub tau_draft_max: f64,
    pub tau_min: f64,
    pub omega_max: f64,
    pub w_track: f64,
    pub w_draft: f64,
    pub l_draft: f64,
    pub col_buffer: f64,
    pub a: f64,
    pub b: f64,
    pub gate_sharpness: f64,
    pub dynamics_mode: DynamicsMode,
}

impl Default for RaceParams {
    fn default() -> Self {
        Self {
            alpha1: 0.001,
            alpha2: 0.0001,
            beta: 0.1,
            n_t: 10,
            dt: 0.1,
            c_drag: 0.1,
            r_col: 1.0,
            tau_nom_max: 1.0,
            tau_draft_max: 3.0,
            tau_min: -3.0,
            omega_max: 3.0,
            w_track: 4.0,
            w_draft: 5.0,
            l_draft: 5.0,
            col_buffer: 0.2,
            a: 5.0,
            b: 4.5,
            gate_sharpness: 4.0,
            dynamics_mode: DynamicsMode::Integrated,
        }
    }
}

impl RaceParams {
    /// Collision radius used inside the planner.
    pub fn planning_radius(&self) -> f64 {
        self.r_col + self.col_buffer
    }

    /// Decision variables per player.
    pub fn block_len(&self) -> usize {
        6 * self.n_t
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("dt", self.dt),
            ("r_col", self.r_col),
            ("tau_nom_max", self.tau_nom_max),
            ("omega_max", self.omega_max),
            ("w_track", self.w_track),
            ("w_draft", self.w_draft),
            ("l_draft", self.l_draft),
            ("a", self.a),
            ("gate_sharpness", self.gate_sharpness),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        let finite = [
            ("beta", self.beta),
            ("c_drag", self.c_drag),
            ("col_buffer", self.col_buffer),
            ("b", self.b),
            ("tau_min", self.tau_min),
            ("tau_draft_max", self.tau_draft_max),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(format!("{name} must be finite"));
            }
        }
        if self.n_t == 0 {
            return Err("n_t must be at least 1".into());
        }
        if self.tau_draft_max < self.tau_nom_max {
            return Err("tau_draft_max must be at least tau_nom_max".into());
        }
        if self.tau_min > 0.0 {
            return Err("tau_min must not be positive".into());
        }
        if self.c_drag < 0.0 || self.col_buffer < 0.0 {
            return Err("c_drag and col_buffer must be non-negative".into());
        }
        Ok(())
    }
}
