//! Scenario files.
//!
//! A scenario is a TOML document with the sections `plant`, `simulation`,
//! `observer`, `controller`, and optional `sweep` and `output`. Vector
//! entries may be plain numbers or strings carrying a unit suffix
//! (`"45 deg"`, `"5 deg/s"`, `"0.1 rad"`); everything is stored in radians.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// Scenario shipped with the binary, addressable by name.
pub const BUNDLED: &[(&str, &str)] = &[("pendulum_sec4", include_str!("../scenarios/pendulum_sec4.toml"))];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{}{key}: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid {
        key: String,
        message: String,
        line: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Pendulum,
    ChainIntegrator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub kind: PlantKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub t_final: f64,
    pub dt: f64,
    #[serde(deserialize_with = "quantities")]
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GHatArg {
    #[default]
    Estimate,
    Measurement,
}

/// Initial extended state: explicit values, or the plant drift at the
/// initial estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExtInit {
    Keyword(ExtKeyword),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtKeyword {
    Drift,
    Zero,
}

impl Default for ExtInit {
    fn default() -> Self {
        Self::Keyword(ExtKeyword::Zero)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverSection {
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<f64>>,
    #[serde(default)]
    pub g_hat_argument: GHatArg,
    /// Initial estimate; the true initial state when absent.
    #[serde(default, deserialize_with = "opt_quantities", skip_serializing_if = "Option::is_none")]
    pub xhat0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xhat0_offset: Option<Vec<f64>>,
    #[serde(default)]
    pub ext0: ExtInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Switching,
    Sdre,
    Adrc,
}

impl ModeName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Switching => "switching",
            Self::Sdre => "sdre",
            Self::Adrc => "adrc",
        }
    }
}

impl fmt::Display for ModeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModeName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "switching" => Ok(Self::Switching),
            "sdre" | "sdre_eso" => Ok(Self::Sdre),
            "adrc" => Ok(Self::Adrc),
            other => Err(format!("unknown mode `{other}` (expected switching, sdre or adrc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdcName {
    #[default]
    Discontinuous,
    Continuous,
    ContinuousScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignName {
    #[default]
    Corrected,
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackName {
    #[default]
    Discontinuous,
    Adrc,
}

fn default_max_switches() -> usize {
    sdre_eso::controller::DEFAULT_MAX_SWITCHES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub mode: ModeName,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default)]
    pub sdc: SdcName,
    /// `ρ` of the switching SDC, one per channel; ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub varpi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub varrho: Option<Vec<f64>>,
    #[serde(default)]
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u0: Option<Vec<f64>>,
    #[serde(default)]
    pub closed_loop_sign: SignName,
    #[serde(default)]
    pub singular_fallback: FallbackName,
    #[serde(default)]
    pub dwell_steps: usize,
    #[serde(default = "default_max_switches")]
    pub max_switches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Multipliers applied to `Q` when designing each ADRC gain.
    #[serde(default)]
    pub q_scales: Vec<f64>,
    /// Explicit ADRC gains, each `n × kn`.
    #[serde(default)]
    pub gains: Vec<Vec<Vec<f64>>>,
    /// Parallel runs; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub plant: PlantSection,
    pub simulation: SimulationSection,
    pub observer: ObserverSection,
    pub controller: ControllerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Quantity {
    Number(f64),
    Integer(i64),
    Text(String),
}

/// Parses `"<value> <unit>"` with units `deg`, `rad`, `deg/s`, `rad/s`.
pub fn parse_quantity(text: &str) -> Result<f64, String> {
    let text = text.trim();
    let split = text
        .find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E')
        .unwrap_or(text.len());
    let (num, unit) = text.split_at(split);
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("cannot read a number from `{text}`"))?;
    match unit.trim() {
        "" | "rad" | "rad/s" => Ok(value),
        "deg" | "deg/s" => Ok(value * PI / 180.0),
        other => Err(format!("unknown unit `{other}` in `{text}`")),
    }
}

fn to_value<E: serde::de::Error>(q: Quantity) -> Result<f64, E> {
    match q {
        Quantity::Number(v) => Ok(v),
        Quantity::Integer(v) => Ok(v as f64),
        Quantity::Text(s) => parse_quantity(&s).map_err(E::custom),
    }
}

fn quantities<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    Vec::<Quantity>::deserialize(d)?.into_iter().map(to_value).collect()
}

fn opt_quantities<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
    Option::<Vec<Quantity>>::deserialize(d)?
        .map(|v| v.into_iter().map(to_value).collect())
        .transpose()
}

/// 1-based line of `key = …` inside `[section]` (top level when empty).
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl Scenario {
    /// Parses and validates a scenario document.
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate().map_err(|e| match e {
            ScenarioError::Invalid { key, message, .. } => {
                let line = key.split_once('.').and_then(|(s, k)| locate(text, s, k));
                ScenarioError::Invalid { key, message, line }
            }
            other => other,
        })?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario is serializable")
    }

    /// Reads a file, or a bundled scenario when `path` names one and no such
    /// file exists.
    pub fn load(path: &str) -> Result<Self, ScenarioError> {
        if !Path::new(path).exists() {
            if let Some((_, text)) = BUNDLED.iter().find(|(name, _)| *name == path) {
                return Self::from_toml(text);
            }
        }
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn bundled(name: &str) -> Option<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_toml(text).expect("bundled scenarios are valid"))
    }

    /// `(k, n)` of the selected plant.
    pub fn dims(&self) -> (usize, usize) {
        match self.plant.kind {
            PlantKind::Pendulum => (2, 1),
            PlantKind::ChainIntegrator => (self.plant.k.unwrap_or(2), self.plant.n.unwrap_or(1)),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |key: &str, message: String| ScenarioError::Invalid {
            key: key.to_string(),
            message,
            line: None,
        };
        if self.name.trim().is_empty() {
            return Err(invalid(".name", "must not be empty".into()));
        }
        let p = &self.plant;
        match p.kind {
            PlantKind::Pendulum => {
                for (key, v) in [("g", p.g), ("l", p.l), ("b", p.b)] {
                    match v {
                        None => return Err(invalid(&format!("plant.{key}"), "required for the pendulum".into())),
                        Some(v) if !v.is_finite() => {
                            return Err(invalid(&format!("plant.{key}"), "must be finite".into()))
                        }
                        _ => {}
                    }
                }
                if p.l.is_some_and(|l| l <= 0.0) {
                    return Err(invalid("plant.l", "pendulum length must be > 0".into()));
                }
                if p.k.is_some() || p.n.is_some() {
                    return Err(invalid("plant.k", "the pendulum has fixed dimensions".into()));
                }
            }
            PlantKind::ChainIntegrator => {
                if p.g.is_some() || p.l.is_some() || p.b.is_some() {
                    return Err(invalid("plant.g", "not a chain-integrator parameter".into()));
                }
                if p.k == Some(0) || p.n == Some(0) {
                    return Err(invalid("plant.k", "k and n must be >= 1".into()));
                }
            }
        }
        let (k, n) = self.dims();
        let total = k * n;

        let s = &self.simulation;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(invalid("simulation.dt", format!("must be > 0, got {}", s.dt)));
        }
        if !(s.t_final >= s.dt && s.t_final.is_finite()) {
            return Err(invalid("simulation.t_final", format!("must be >= dt, got {}", s.t_final)));
        }
        if s.x0.len() != total {
            return Err(invalid("simulation.x0", format!("needs {total} entries, got {}", s.x0.len())));
        }

        let o = &self.observer;
        if !(o.epsilon > 0.0 && o.epsilon.is_finite()) {
            return Err(invalid("observer.epsilon", format!("must be > 0, got {}", o.epsilon)));
        }
        if s.dt > o.epsilon / 10.0 * (1.0 + 1e-12) {
            return Err(invalid(
                "simulation.dt",
                format!("{} exceeds observer.epsilon/10 = {}", s.dt, o.epsilon / 10.0),
            ));
        }
        if let Some(c) = &o.coefficients {
            if c.len() != k + 1 || c.iter().any(|v| !(*v > 0.0)) {
                return Err(invalid("observer.coefficients", format!("needs {} positive entries", k + 1)));
            }
        }
        if o.xhat0.as_ref().is_some_and(|v| v.len() != total) {
            return Err(invalid("observer.xhat0", format!("needs {total} entries")));
        }
        if o.xhat0_offset.as_ref().is_some_and(|v| v.len() != total) {
            return Err(invalid("observer.xhat0_offset", format!("needs {total} entries")));
        }
        if let ExtInit::Values(v) = &o.ext0 {
            if v.len() != n {
                return Err(invalid("observer.ext0", format!("needs {n} entries")));
            }
        }

        let c = &self.controller;
        check_square("controller.q", &c.q, total)?;
        check_square("controller.r", &c.r, n)?;
        if c.rho.as_ref().is_some_and(|v| v.len() != n) {
            return Err(invalid("controller.rho", format!("needs {n} entries")));
        }
        if c.varrho.as_ref().is_some_and(|v| v.len() != n) {
            return Err(invalid("controller.varrho", format!("needs {n} entries")));
        }
        if c.u0.as_ref().is_some_and(|v| v.len() != n) {
            return Err(invalid("controller.u0", format!("needs {n} entries")));
        }
        if !(c.tau >= 0.0) {
            return Err(invalid("controller.tau", "must be >= 0".into()));
        }
        match c.sdc {
            SdcName::Continuous if n < 2 => {
                return Err(invalid("controller.sdc", "continuous needs n >= 2; use continuous_scalar".into()))
            }
            SdcName::ContinuousScalar if (k, n) != (2, 1) => {
                return Err(invalid("controller.sdc", "continuous_scalar needs k = 2 and n = 1".into()))
            }
            SdcName::Discontinuous if total < 2 => {
                return Err(invalid("controller.sdc", "discontinuous needs k*n >= 2".into()))
            }
            _ => {}
        }

        if let Some(sw) = &self.sweep {
            if sw.q_scales.is_empty() && sw.gains.is_empty() {
                return Err(invalid("sweep.q_scales", "the ADRC sweep is empty".into()));
            }
            if sw.q_scales.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(invalid("sweep.q_scales", "scales must be > 0".into()));
            }
            for g in &sw.gains {
                if g.len() != n || g.iter().any(|row| row.len() != total) {
                    return Err(invalid("sweep.gains", format!("each gain must be {n}x{total}")));
                }
            }
        }
        Ok(())
    }
}

fn check_square(key: &str, m: &[Vec<f64>], size: usize) -> Result<(), ScenarioError> {
    if m.len() != size || m.iter().any(|row| row.len() != size) {
        return Err(ScenarioError::Invalid {
            key: key.to_string(),
            message: format!("must be {size}x{size}"),
            line: None,
        });
    }
    Ok(())
}
