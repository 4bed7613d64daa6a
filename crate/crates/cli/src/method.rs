//! Method descriptors: `none`, an immediate heuristic such as `WUSSOLC`, or a
//! deferred variant `DS2:WUSSOLC` with an optional tolerance `DS2:WUSSOLC:0.25`.

use std::fmt;
use std::str::FromStr;

use hotdogs::heuristics::HeuristicKind;
use hotdogs::hotdogs::Variant;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Method {
    /// Single Gaussian, no splitting.
    None,
    /// All splits at the initial epoch.
    Immediate { kind: HeuristicKind },
    /// Deferred splitting; `epsilon` falls back to the run settings.
    Deferred {
        variant: Variant,
        kind: HeuristicKind,
        epsilon: Option<f64>,
    },
}

impl Method {
    pub fn kind(&self) -> Option<HeuristicKind> {
        match self {
            Method::None => None,
            Method::Immediate { kind } | Method::Deferred { kind, .. } => Some(*kind),
        }
    }

    /// Label written to the `Method` column.
    pub fn label(&self) -> String {
        match self {
            Method::None => "none".into(),
            Method::Immediate { kind } => kind.to_string(),
            Method::Deferred {
                variant,
                kind,
                epsilon: None,
            } => format!("{variant}-{kind}"),
            Method::Deferred {
                variant,
                kind,
                epsilon: Some(e),
            } => format!("{variant}-{kind}@{e}"),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| CliError::Config(format!("method {s:?}: {m}"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let kind = |p: &str| p.parse::<HeuristicKind>().map_err(|e| bad(e.to_string()));
        match parts.as_slice() {
            [p] if p.eq_ignore_ascii_case("none") => Ok(Method::None),
            [p] => Ok(Method::Immediate { kind: kind(p)? }),
            [v, k] | [v, k, _] => {
                let variant = v.parse::<Variant>().map_err(|e| bad(e.to_string()))?;
                let epsilon = match parts.get(2) {
                    Some(e) => Some(
                        e.trim()
                            .parse::<f64>()
                            .map_err(|_| bad(format!("bad tolerance {e:?}")))?,
                    ),
                    None => None,
                };
                Ok(Method::Deferred {
                    variant,
                    kind: kind(k)?,
                    epsilon,
                })
            }
            _ => Err(bad("expected none, KIND, VARIANT:KIND or VARIANT:KIND:EPS".into())),
        }
    }
}
