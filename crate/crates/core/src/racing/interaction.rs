//! Collision responsibility and drafting.

use super::params::RaceParams;

/// Logistic function, evaluated without overflow.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ℓ_1(h)` with its first and second derivatives.
pub fn responsibility_p1(h: f64, params: &RaceParams) -> (f64, f64, f64) {
    let s = logistic(params.a * h - params.b);
    let value = s - logistic(-params.b);
    let d1 = params.a * s * (1.0 - s);
    let d2 = params.a * params.a * s * (1.0 - s) * (1.0 - 2.0 * s);
    (value, d1, d2)
}

/// `(ℓ_1(h), ℓ_2(h))` for `h = p_2_long − p_1_long`. The trailing player's
/// term is positive and tightens its collision constraint.
pub fn responsibility(h: f64, params: &RaceParams) -> (f64, f64) {
    (responsibility_p1(h, params).0, responsibility_p1(-h, params).0)
}

/// Player `i`'s collision constraint value (`≥ 0` is safe), with the
/// planning radius.
pub fn collision_constraint(p1: [f64; 2], p2: [f64; 2], i: usize, params: &RaceParams) -> f64 {
    let (ego, opp) = if i == 0 { (p1, p2) } else { (p2, p1) };
    let d2 = (ego[0] - opp[0]).powi(2) + (ego[1] - opp[1]).powi(2);
    let r = params.planning_radius();
    d2 - r * r - responsibility_p1(opp[1] - ego[1], params).0
}

/// Smoothing of `|Δlat|` inside the drafting gate.
pub const DRAFT_ABS_SMOOTHING: f64 = 0.1;

/// Drafting gate `G(Δℓ, Δlat)` with gradient and Hessian in `(Δℓ, Δlat)`.
/// `Δℓ = p_opp_long − p_ego_long`, `Δlat = p_opp_lat − p_ego_lat`.
pub fn draft_gate(dl: f64, dlat: f64, params: &RaceParams) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let s = params.gate_sharpness;
    let w0 = params.w_draft / 2.0;
    let eps = DRAFT_ABS_SMOOTHING;
    let q = (dlat * dlat + eps * eps).sqrt();
    let q1 = dlat / q;
    let q2 = eps * eps / (q * q * q);

    // Arguments of the three logistic factors and their derivatives.
    let z = [s * dl, s * (params.l_draft - dl), s * (w0 * (1.0 - dl / params.l_draft) - q)];
    let dz = [[s, 0.0], [-s, 0.0], [-s * w0 / params.l_draft, -s * q1]];
    let mut d2z = [[[0.0; 2]; 2]; 3];
    d2z[2][1][1] = -s * q2;

    let norm = logistic(s * params.l_draft / 2.0).powi(3);
    let mut log_g = -norm.ln();
    let mut lg = [0.0; 2];
    let mut lgg = [[0.0; 2]; 2];
    for k in 0..3 {
        let sig = logistic(z[k]);
        log_g += sig.ln();
        let d = 1.0 - sig;
        let dd = -sig * (1.0 - sig);
        for a in 0..2 {
            lg[a] += d * dz[k][a];
            for b in 0..2 {
                lgg[a][b] += dd * dz[k][a] * dz[k][b] + d * d2z[k][a][b];
            }
        }
    }
    let g = log_g.exp();
    if g >= 1.0 {
        return (1.0, [0.0; 2], [[0.0; 2]; 2]);
    }
    let grad = [g * lg[0], g * lg[1]];
    let mut hess = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            hess[a][b] = g * (lgg[a][b] + lg[a] * lg[b]);
        }
    }
    (g, grad, hess)
}

/// Acceleration limit `τ^draft` for the ego given both positions `[lat, long]`.
pub fn draft_limit(p_ego: [f64; 2], p_opp: [f64; 2], params: &RaceParams) -> f64 {
    let (g, _, _) = draft_gate(p_opp[1] - p_ego[1], p_opp[0] - p_ego[0], params);
    params.tau_nom_max + (params.tau_draft_max - params.tau_nom_max) * g
}
