//! Scripted controller sessions for conformance checks.
//!
//! One entry per line:
//!
//! ```text
//! # comment
//! ?R/ -> OK/          send bytes, expect the reply
//! tick 0.5            advance the motion clock by 0.5 s
//! ```

use super::controller::ControllerState;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum TranscriptStep {
    Exchange { line: usize, send: String, expect: String },
    Tick { line: usize, dt: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub line: usize,
    pub send: String,
    pub expected: String,
    pub actual: String,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "line {}: {} -> expected {}, got {}",
            self.line, self.send, self.expected, self.actual
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transcript {
    pub steps: Vec<TranscriptStep>,
}

impl Transcript {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            if let Some(dt) = l.strip_prefix("tick ") {
                let dt = dt
                    .trim()
                    .parse()
                    .map_err(|_| format!("line {line}: bad tick duration {dt:?}"))?;
                steps.push(TranscriptStep::Tick { line, dt });
            } else if let Some((send, expect)) = l.split_once("->") {
                steps.push(TranscriptStep::Exchange {
                    line,
                    send: send.trim().to_string(),
                    expect: expect.trim().to_string(),
                });
            } else {
                return Err(format!("line {line}: expected 'bytes -> reply' or 'tick <s>'"));
            }
        }
        Ok(Transcript { steps })
    }

    /// Plays the script against `ctrl`, returning every reply that differs.
    pub fn replay(&self, ctrl: &mut ControllerState) -> Vec<Mismatch> {
        let mut out = Vec::new();
        for step in &self.steps {
            match step {
                TranscriptStep::Tick { dt, .. } => ctrl.tick(*dt),
                TranscriptStep::Exchange { line, send, expect } => {
                    let actual = ctrl.execute_bytes(send.as_bytes()).to_string();
                    if &actual != expect {
                        out.push(Mismatch {
                            line: *line,
                            send: send.clone(),
                            expected: expect.clone(),
                            actual,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn exchanges(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s, TranscriptStep::Exchange { .. }))
            .count()
    }
}

/// Reference session exercising every command form and reply kind.
pub const GOLDEN: &str = include_str!("golden.txt");

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::AxisLimits;

    #[test]
    fn golden_transcript_passes() {
        let t = Transcript::parse(GOLDEN).unwrap();
        let limits = AxisLimits {
            neg_limit: -5000,
            pos_limit: 5000,
            default_velocity: 1000,
        };
        let mut c = ControllerState::with_limits(1, [limits; 3]);
        let bad = t.replay(&mut c);
        assert!(bad.is_empty(), "{}", bad.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("\n"));
    }

    #[test]
    fn mismatch_is_reported() {
        let t = Transcript::parse("?R/ -> OK/\n?X/ -> X=1/\n").unwrap();
        let bad = t.replay(&mut ControllerState::new(1));
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].actual, "X=0/");
        assert!(Transcript::parse("nonsense").is_err());
    }
}
