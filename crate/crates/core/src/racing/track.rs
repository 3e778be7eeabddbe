use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("checkpoints are collinear, no arc through them")]
    DegenerateCircle,
    #[error("a track needs at least 3 checkpoints, got {0}")]
    TooFewCheckpoints(usize),
    #[error("checkpoint {0} does not increase in the longitudinal direction")]
    NotIncreasing(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid track: {0}")]
    Invalid(String),
}

/// Circle through three centerline checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub center_lat: f64,
    pub center_long: f64,
    pub radius: f64,
}

impl Arc {
    pub fn distance_squared(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.center_lat;
        let dy = p[1] - self.center_long;
        dx * dx + dy * dy
    }

    /// Track constraint values `(d² − (r − w/2)², (r + w/2)² − d²)`, both
    /// non-negative on the track.
    pub fn edge_slack(&self, p: [f64; 2], width: f64) -> (f64, f64) {
        let d2 = self.distance_squared(p);
        (d2 - (self.radius - width / 2.0).powi(2), (self.radius + width / 2.0).powi(2) - d2)
    }

    /// True when `p` is within the track edges `r ± w/2`.
    pub fn contains(&self, p: [f64; 2], width: f64) -> bool {
        let d = self.distance_squared(p).sqrt();
        d >= self.radius - width / 2.0 && d <= self.radius + width / 2.0
    }
}

/// Circumcircle of three points given as `[lat, long]`.
pub fn circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Result<Arc, TrackError> {
    // Work relative to `a` to keep the products small.
    let (bx, by) = (b[0] - a[0], b[1] - a[1]);
    let (cx, cy) = (c[0] - a[0], c[1] - a[1]);
    let d = 2.0 * (bx * cy - by * cx);
    let scale = (bx * bx + by * by).max(cx * cx + cy * cy);
    if !(d.abs() > 1e-14 * scale) {
        return Err(TrackError::DegenerateCircle);
    }
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    let ux = (cy * b2 - by * c2) / d;
    let uy = (bx * c2 - cx * b2) / d;
    Ok(Arc {
        center_lat: a[0] + ux,
        center_long: a[1] + uy,
        radius: (ux * ux + uy * uy).sqrt(),
    })
}

/// Repeating centerline described by checkpoints over one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackLayout {
    /// `(long, lat)` pairs with `0 ≤ long < pattern_period`.
    pub checkpoints: Vec<(f64, f64)>,
    pub width: f64,
    pub pattern_period: f64,
    pub perturbation: f64,
}

const DEFAULT_SPACING: f64 = 2.5;
const DEFAULT_JITTER: f64 = 1e-3;

impl TrackLayout {
    /// Straight, half-sine left turn, straight, half-sine right turn.
    pub fn default_pattern(width: f64) -> Self {
        let period = 120.0;
        let n = (period / DEFAULT_SPACING).round() as usize;
        let checkpoints = (0..n)
            .map(|k| {
                let s = k as f64 * DEFAULT_SPACING;
                let jitter = if k % 2 == 0 { DEFAULT_JITTER } else { -DEFAULT_JITTER };
                let lat = if s < 20.0 {
                    jitter
                } else if s < 60.0 {
                    4.0 * (std::f64::consts::PI * (s - 20.0) / 40.0).sin()
                } else if s < 80.0 {
                    jitter
                } else {
                    -4.0 * (std::f64::consts::PI * (s - 80.0) / 40.0).sin()
                };
                (s, lat)
            })
            .collect();
        Self { checkpoints, width, pattern_period: period, perturbation: DEFAULT_JITTER }
    }

    /// Validate checkpoints and jitter the middle of any collinear triple.
    pub fn from_checkpoints(
        mut checkpoints: Vec<(f64, f64)>,
        width: f64,
        pattern_period: f64,
        perturbation: f64,
    ) -> Result<Self, TrackError> {
        if checkpoints.len() < 3 {
            return Err(TrackError::TooFewCheckpoints(checkpoints.len()));
        }
        for k in 1..checkpoints.len() {
            if !(checkpoints[k].0 > checkpoints[k - 1].0) {
                return Err(TrackError::NotIncreasing(k));
            }
        }
        let first = checkpoints[0].0;
        let last = checkpoints[checkpoints.len() - 1].0;
        if !(pattern_period > last - first) {
            return Err(TrackError::Invalid(format!(
                "period {pattern_period} does not exceed the checkpoint span {}",
                last - first
            )));
        }
        if !(width > 0.0) || !(perturbation > 0.0) {
            return Err(TrackError::Invalid("width and perturbation must be positive".into()));
        }
        let n = checkpoints.len();
        for k in 0..n {
            let prev = checkpoints[(k + n - 1) % n];
            let next = checkpoints[(k + 1) % n];
            let prev_long = if k == 0 { prev.0 - pattern_period } else { prev.0 };
            let next_long = if k + 1 == n { next.0 + pattern_period } else { next.0 };
            let cur = checkpoints[k];
            if circumcircle([prev.1, prev_long], [cur.1, cur.0], [next.1, next_long]).is_err() {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                checkpoints[k].1 += sign * perturbation;
            }
        }
        Ok(Self { checkpoints, width, pattern_period, perturbation })
    }

    /// Parse `long lat` lines. `#` starts a comment; an optional
    /// `period <meters>` line sets the repeat length, otherwise the last
    /// spacing is repeated once past the final checkpoint.
    pub fn parse(text: &str, width: f64) -> Result<Self, TrackError> {
        let mut pts = Vec::new();
        let mut period = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |message: String| TrackError::Parse { line: i + 1, message };
            if fields[0] == "period" {
                if fields.len() != 2 {
                    return Err(bad("expected `period <meters>`".into()));
                }
                let p: f64 = fields[1].parse().map_err(|_| bad(format!("bad number `{}`", fields[1])))?;
                period = Some(p);
                continue;
            }
            if fields.len() != 2 {
                return Err(bad(format!("expected two numbers, found {} fields", fields.len())));
            }
            let long: f64 = fields[0].parse().map_err(|_| bad(format!("bad number `{}`", fields[0])))?;
            let lat: f64 = fields[1].parse().map_err(|_| bad(format!("bad number `{}`", fields[1])))?;
            if !long.is_finite() || !lat.is_finite() {
                return Err(bad("non-finite value".into()));
            }
            pts.push((long, lat));
        }
        if pts.len() < 3 {
            return Err(TrackError::TooFewCheckpoints(pts.len()));
        }
        let period = match period {
            Some(p) => p,
            None => {
                let n = pts.len();
                pts[n - 1].0 - pts[0].0 + (pts[n - 1].0 - pts[n - 2].0)
            }
        };
        Self::from_checkpoints(pts, width, period, DEFAULT_JITTER)
    }

    /// Checkpoint `k` of the infinitely repeated sequence as `[lat, long]`.
    fn point(&self, k: i64) -> [f64; 2] {
        let n = self.checkpoints.len() as i64;
        let rep = k.div_euclid(n);
        let (long, lat) = self.checkpoints[k.rem_euclid(n) as usize];
        [lat, long + rep as f64 * self.pattern_period]
    }

    /// Circle through the three checkpoints nearest to `position = [lat, long]`.
    pub fn fit_arc(&self, position: [f64; 2]) -> Result<Arc, TrackError> {
        let n = self.checkpoints.len() as i64;
        let base = (position[1] / self.pattern_period).floor() as i64 * n;
        let mut cand: Vec<(f64, i64)> = (base - n..base + 2 * n)
            .map(|k| {
                let p = self.point(k);
                let d = (p[0] - position[0]).powi(2) + (p[1] - position[1]).powi(2);
                (d, k)
            })
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut ks = [cand[0].1, cand[1].1, cand[2].1];
        ks.sort_unstable();
        circumcircle(self.point(ks[0]), self.point(ks[1]), self.point(ks[2]))
    }

    /// Centerline lateral offset at `long`, linearly interpolated.
    pub fn center_lat(&self, long: f64) -> f64 {
        let n = self.checkpoints.len() as i64;
        let base = (long / self.pattern_period).floor() as i64 * n - 1;
        let mut k = base;
        while self.point(k)[1] > long {
            k -= 1;
        }
        while self.point(k + 1)[1] <= long {
            k += 1;
        }
        let a = self.point(k);
        let b = self.point(k + 1);
        let t = (long - a[1]) / (b[1] - a[1]);
        a[0] + t * (b[0] - a[0])
    }

    /// True when `position` lies between the edges of its fitted arc.
    pub fn on_track(&self, position: [f64; 2]) -> Result<bool, TrackError> {
        Ok(self.fit_arc(position)?.contains(position, self.width))
    }
}

impl Default for TrackLayout {
    fn default() -> Self {
        Self::default_pattern(4.0)
    }
}
