use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A duration given either in frames (`50`) or in seconds (`2s`, `0.4s`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Span {
    Frames(usize),
    Seconds(f64),
}

impl Span {
    /// Frame count at `fps`, rounded to the nearest frame.
    pub fn frames(self, fps: f64) -> usize {
        match self {
            Span::Frames(n) => n,
            Span::Seconds(s) => (s * fps).round() as usize,
        }
    }
}

impl std::str::FromStr for Span {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || Error::invalid(format!("`{s}` is neither a frame count nor a duration like `2s`"));
        if let Some(secs) = t.strip_suffix('s') {
            let v: f64 = secs.trim().parse().map_err(|_| bad())?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad());
            }
            Ok(Span::Seconds(v))
        } else {
            t.parse().map(Span::Frames).map_err(|_| bad())
        }
    }
}

impl std::fmt::Display for Span {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Span::Frames(n) => write!(f, "{n}"),
            Span::Seconds(s) => write!(f, "{s}s"),
        }
    }
}

impl TryFrom<String> for Span {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Span> for String {
    fn from(s: Span) -> String {
        s.to_string()
    }
}
