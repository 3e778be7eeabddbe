//! Scenario files: `key = value` lines naming the two starting states.
//!
//! ```text
//! # lat long v theta, long measured from the track phase
//! p1 = -0.8 5.0 2.0 0.0
//! p2 = 0.9 4.0 2.5 0.0
//! phase = 0.0
//! pair = N-N
//! ```
//!
//! `game = stackelberg-toy` selects the two-variable test game instead of
//! the racing model; the states are then ignored.

use std::fmt;

use stackrace::racing::CraftState;
use stackrace::sim::CompetitionType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GameKind {
    Racing,
    StackelbergToy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub game: GameKind,
    pub states: Option<[CraftState; 2]>,
    pub pair: Option<CompetitionType>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

fn state(value: &str, line: usize) -> Result<CraftState, ParseError> {
    let nums: Result<Vec<f64>, _> = value.split_whitespace().map(str::parse::<f64>).collect();
    match nums {
        Ok(v) if v.len() == 4 && v.iter().all(|x| x.is_finite()) => Ok(CraftState::new(v[0], v[1], v[2], v[3])),
        _ => Err(ParseError {
            line,
            message: format!("expected four numbers `lat long v theta`, got `{value}`"),
        }),
    }
}

pub fn parse(text: &str) -> Result<ScenarioFile, ParseError> {
    let mut p = [None, None];
    let mut phase = 0.0;
    let mut pair = None;
    let mut game = GameKind::Racing;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(ParseError { line, message: format!("expected `key = value`, got `{body}`") });
        };
        let (key, value) = (key.trim(), value.trim());
        let bad = |message: String| ParseError { line, message };
        match key {
            "p1" => p[0] = Some(state(value, line)?),
            "p2" => p[1] = Some(state(value, line)?),
            "phase" => {
                phase = value
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("bad phase `{value}`")))?
            }
            "pair" => pair = Some(value.parse::<CompetitionType>().map_err(bad)?),
            "game" => {
                game = match value {
                    "racing" => GameKind::Racing,
                    "stackelberg-toy" => GameKind::StackelbergToy,
                    _ => return Err(bad(format!("unknown game `{value}`"))),
                }
            }
            _ => return Err(bad(format!("unknown key `{key}`"))),
        }
    }
    let states = match p {
        [Some(a), Some(b)] => {
            let shift = |s: CraftState| CraftState::new(s.p_lat, s.p_long + phase, s.v, s.theta);
            Some([shift(a), shift(b)])
        }
        [None, None] if game == GameKind::StackelbergToy => None,
        _ => {
            return Err(ParseError {
                line: 0,
                message: "scenario needs both `p1` and `p2`".into(),
            })
        }
    };
    Ok(ScenarioFile { game, states, pair })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_states_and_phase() {
        let s = parse("p1 = 0 1 2 0\np2 = 1 0 2 0 # behind\nphase = 10\npair = L-F\n").unwrap();
        let [a, b] = s.states.unwrap();
        assert_eq!(a.p_long, 11.0);
        assert_eq!(b.p_lat, 1.0);
        assert_eq!(s.pair.unwrap().label(), "L-F");
    }

    #[test]
    fn reports_offending_line() {
        let e = parse("p1 = 0 1 2 0\n\np2 = 1 0 x 0\n").unwrap_err();
        assert_eq!(e.line, 3);
        let e = parse("p1 = 0 1 2 0\nspeed = 3\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(parse("p1 = 0 1 2 0\n").is_err());
    }
}
