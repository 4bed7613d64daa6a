//! Built-in test cases (GEO, Molniya, Earth–Moon northern butterfly) and the
//! TOML scenario file format.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsModel, KeplerElements, ModelKind, Units, EARTH_MU};
use crate::integrator::IntegratorOptions;
use crate::propagation::{check_spd, integrate_flow, FlowOrder};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {name:?}; valid names are geo, molniya, butterfly")]
    Unknown { name: String },
    #[error("scenario field {field}: {message}")]
    Schema { field: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("propagation failed: {0}")]
    Propagation(String),
}

fn schema(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Monte Carlo truth settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarlo {
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub model: DynamicsModel,
    pub x0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub t0: f64,
    pub tf: f64,
    pub mc: MonteCarlo,
    /// Free-form provenance notes (unit conventions, assumed elements).
    pub metadata: BTreeMap<String, String>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.model
            .validate()
            .map_err(|e| schema("model.mu", e.to_string()))?;
        if self.x0.len() != 6 || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(schema("x0", "expected six finite numbers"));
        }
        if self.p0.shape() != (6, 6) {
            return Err(schema("P0", "expected a 6x6 matrix"));
        }
        if (&self.p0 - self.p0.transpose()).amax() > 1e-15 * self.p0.amax() {
            return Err(schema("P0", "matrix is not symmetric"));
        }
        check_spd(&self.p0).map_err(|e| schema("P0", e.to_string()))?;
        if !(self.tf > self.t0) || !self.t0.is_finite() || !self.tf.is_finite() {
            return Err(schema("span", "tf must exceed t0"));
        }
        if self.mc.n < 2 {
            return Err(schema("mc.N", "at least two samples are required"));
        }
        Ok(())
    }

    /// Serializes to the scenario file format with an explicit full `P0`.
    pub fn to_toml(&self) -> String {
        let file = ScenarioFile {
            builtin: None,
            name: Some(self.name.clone()),
            model: Some(ModelSection {
                kind: Some(self.model.kind),
                mu: Some(self.model.mu),
                units: Some(self.model.units),
            }),
            x0: Some(self.x0.iter().copied().collect()),
            p0: Some(CovarianceSpec::Full(
                (0..6)
                    .map(|i| (0..6).map(|j| self.p0[(i, j)]).collect())
                    .collect(),
            )),
            span: Some(SpanSection {
                t0: Some(self.t0),
                tf: Some(self.tf),
            }),
            mc: Some(McSection {
                n: Some(self.mc.n),
                seed: Some(self.mc.seed),
            }),
            metadata: Some(self.metadata.clone()),
        };
        toml::to_string(&file).expect("scenario serializes")
    }
}

/// Standard gravitational parameter of the Moon, km³/s².
pub const MOON_MU: f64 = 4902.800066;
/// Mean Earth–Moon distance, km.
pub const EARTH_MOON_DISTANCE_KM: f64 = 384_400.0;
/// Sidereal day, s.
pub const SIDEREAL_DAY_S: f64 = 86_164.0905;
/// Earth–Moon mass parameter of the butterfly case.
pub const BUTTERFLY_MU: f64 = 1.0 / (81.30059 + 1.0);
/// Butterfly span in nondimensional time: the minimizer of the return
/// distance `‖x(t) − x(0)‖` near 21.1 days (see [`refine_return_time`]).
pub const BUTTERFLY_TF: f64 = 4.801_550_356_857_412;
/// Seed for the butterfly return-time search, days.
pub const BUTTERFLY_SEED_DAYS: f64 = 21.1;

pub const DEFAULT_MC: MonteCarlo = MonteCarlo {
    n: 10_000,
    seed: 20_241_016,
};

fn diag_sq(sd: [f64; 6]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(6, sd.iter().map(|s| s * s)))
}

/// GEO/Molniya initial covariance: 10, 10, 1 km and 3, 3, 0.01 m/s
/// standard deviations, with velocities converted to km/s.
fn leo_style_covariance() -> DMatrix<f64> {
    diag_sq([10.0, 10.0, 1.0, 3.0e-3, 3.0e-3, 0.01e-3])
}

pub fn earth_moon_units() -> Units {
    let l = EARTH_MOON_DISTANCE_KM;
    Units {
        length_km: l,
        time_s: (l.powi(3) / (EARTH_MU + MOON_MU)).sqrt(),
    }
}

pub fn geo() -> Scenario {
    let a = (EARTH_MU * (SIDEREAL_DAY_S / (2.0 * std::f64::consts::PI)).powi(2)).cbrt();
    let el = KeplerElements {
        a,
        e: 0.0,
        i: 0.0,
        raan: 0.0,
        argp: 0.0,
        nu: 0.0,
    };
    let mut metadata = BTreeMap::new();
    metadata.insert("units".into(), "km, km/s, s".into());
    metadata.insert(
        "orbit".into(),
        "circular equatorial, radius from one sidereal day".into(),
    );
    Scenario {
        name: "geo".into(),
        model: DynamicsModel::two_body(EARTH_MU).expect("valid mu"),
        x0: el.to_cartesian(EARTH_MU),
        p0: leo_style_covariance(),
        t0: 0.0,
        tf: SIDEREAL_DAY_S,
        mc: DEFAULT_MC,
        metadata,
    }
}

/// Molniya elements; RAAN and true anomaly are not given and set to zero
/// (start at perigee).
pub fn molniya_elements() -> KeplerElements {
    KeplerElements {
        a: 26_555.4,
        e: 0.72,
        i: 63.5f64.to_radians(),
        raan: 0.0,
        argp: 270.0f64.to_radians(),
        nu: 0.0,
    }
}

pub fn molniya() -> Scenario {
    let el = molniya_elements();
    let mut metadata = BTreeMap::new();
    metadata.insert("units".into(), "km, km/s, s".into());
    metadata.insert("raan".into(), "0 (not given, assumed)".into());
    metadata.insert("true_anomaly".into(), "0, perigee start (not given, assumed)".into());
    metadata.insert(
        "semi_major_axis".into(),
        "26555.4 km, the value consistent with the ~12 h period".into(),
    );
    Scenario {
        name: "molniya".into(),
        model: DynamicsModel::two_body(EARTH_MU).expect("valid mu"),
        x0: el.to_cartesian(EARTH_MU),
        p0: leo_style_covariance(),
        t0: 0.0,
        tf: el.period(EARTH_MU),
        mc: DEFAULT_MC,
        metadata,
    }
}

pub fn butterfly_state() -> DVector<f64> {
    DVector::from_vec(vec![0.924, 1.47e-28, 0.148, -2.71e-16, -0.147, -2.42e-14])
}

pub fn butterfly() -> Scenario {
    let mut p0 = DMatrix::identity(6, 6) * 1e-10;
    p0[(0, 0)] += 1e-8;
    p0[(2, 2)] += 1e-8;
    let mut metadata = BTreeMap::new();
    metadata.insert("units".into(), "nondimensional rotating frame".into());
    metadata.insert(
        "tf".into(),
        "return-distance minimizer near 21.1 days; the rounded initial state is not exactly periodic"
            .into(),
    );
    Scenario {
        name: "butterfly".into(),
        model: DynamicsModel::cr3bp(BUTTERFLY_MU, earth_moon_units()).expect("valid mu"),
        x0: butterfly_state(),
        p0,
        t0: 0.0,
        tf: BUTTERFLY_TF,
        mc: DEFAULT_MC,
        metadata,
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["geo", "molniya", "butterfly"];

pub fn builtin_scenario(name: &str) -> Result<Scenario, ScenarioError> {
    match name.trim().to_ascii_lowercase().as_str() {
        "geo" => Ok(geo()),
        "molniya" => Ok(molniya()),
        "butterfly" => Ok(butterfly()),
        _ => Err(ScenarioError::Unknown {
            name: name.to_string(),
        }),
    }
}

/// Distance between the state at `t` and the initial state.
pub fn return_distance(
    model: &DynamicsModel,
    x0: &DVector<f64>,
    t: f64,
    opts: &IntegratorOptions,
) -> Result<f64, ScenarioError> {
    let flow = integrate_flow(model, x0, 0.0, &[t], FlowOrder::State, opts)
        .map_err(|e| ScenarioError::Propagation(e.to_string()))?;
    Ok((&flow.last().state - x0).norm())
}

/// Golden-section minimization of the return distance over `[lo, hi]`.
pub fn refine_return_time(
    model: &DynamicsModel,
    x0: &DVector<f64>,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<f64, ScenarioError> {
    let opts = IntegratorOptions::default();
    let f = |t: f64| return_distance(model, x0, t, &opts);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Search bracket for the butterfly return time: ±0.3 nondimensional time
/// units around 21.1 days.
pub fn butterfly_search_bracket() -> (f64, f64) {
    let seed = BUTTERFLY_SEED_DAYS * 86_400.0 / earth_moon_units().time_s;
    (seed - 0.3, seed + 0.3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceSpec {
    Full(Vec<Vec<f64>>),
    Terms {
        /// Variances on the diagonal.
        #[serde(default)]
        diagonal: Option<Vec<f64>>,
        /// Standard deviations, squared onto the diagonal.
        #[serde(default)]
        std: Option<Vec<f64>>,
        /// Multiple of the identity added on top.
        #[serde(default)]
        identity: Option<f64>,
    },
}

impl CovarianceSpec {
    fn to_matrix(&self) -> Result<DMatrix<f64>, ScenarioError> {
        match self {
            CovarianceSpec::Full(rows) => {
                if rows.len() != 6 || rows.iter().any(|r| r.len() != 6) {
                    return Err(schema("P0", "full matrix must be 6x6"));
                }
                Ok(DMatrix::from_fn(6, 6, |i, j| rows[i][j]))
            }
            CovarianceSpec::Terms {
                diagonal,
                std,
                identity,
            } => {
                let mut p = DMatrix::zeros(6, 6);
                if let Some(d) = diagonal {
                    if d.len() != 6 {
                        return Err(schema("P0.diagonal", "expected six entries"));
                    }
                    for (i, v) in d.iter().enumerate() {
                        p[(i, i)] += v;
                    }
                }
                if let Some(s) = std {
                    if s.len() != 6 {
                        return Err(schema("P0.std", "expected six entries"));
                    }
                    for (i, v) in s.iter().enumerate() {
                        p[(i, i)] += v * v;
                    }
                }
                if let Some(c) = identity {
                    for i in 0..6 {
                        p[(i, i)] += c;
                    }
                }
                if diagonal.is_none() && std.is_none() && identity.is_none() {
                    return Err(schema("P0", "needs diagonal, std, or identity terms"));
                }
                Ok(p)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    kind: Option<ModelKind>,
    mu: Option<f64>,
    units: Option<Units>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanSection {
    t0: Option<f64>,
    tf: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct McSection {
    #[serde(rename = "N")]
    n: Option<usize>,
    seed: Option<u64>,
}

/// On-disk scenario layout. Every field is optional so that a builtin can be
/// named and selectively overridden.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    builtin: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    x0: Option<Vec<f64>>,
    #[serde(rename = "P0", skip_serializing_if = "Option::is_none")]
    p0: Option<CovarianceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    span: Option<SpanSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc: Option<McSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metadata: Option<BTreeMap<String, String>>,
}

/// Parses scenario text. A `builtin` key starts from that scenario and
/// applies the remaining fields as overrides; otherwise `model`, `x0`, `P0`
/// and `span` are required.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| ScenarioError::Schema {
        field: "<document>".into(),
        message: e.message().to_string(),
    })?;
    let base = match &file.builtin {
        Some(name) => Some(builtin_scenario(name)?),
        None => None,
    };
    let model_section = file.model.clone().unwrap_or_default();
    let model = match (&base, file.model.is_some()) {
        (Some(b), false) => b.model,
        (base, _) => {
            let base = base.as_ref();
            let kind = model_section
                .kind
                .or(base.map(|b| b.model.kind))
                .ok_or_else(|| schema("model.kind", "missing"))?;
            let mu = model_section
                .mu
                .or(base.map(|b| b.model.mu))
                .ok_or_else(|| schema("model.mu", "missing"))?;
            let units = model_section
                .units
                .or(base.map(|b| b.model.units))
                .unwrap_or_default();
            let m = DynamicsModel { kind, mu, units };
            m.validate().map_err(|e| schema("model.mu", e.to_string()))?;
            m
        }
    };
    let x0 = match (&file.x0, &base) {
        (Some(v), _) => {
            if v.len() != 6 {
                return Err(schema("x0", format!("expected 6 entries, got {}", v.len())));
            }
            DVector::from_column_slice(v)
        }
        (None, Some(b)) => b.x0.clone(),
        (None, None) => return Err(schema("x0", "missing")),
    };
    let p0 = match (&file.p0, &base) {
        (Some(spec), _) => spec.to_matrix()?,
        (None, Some(b)) => b.p0.clone(),
        (None, None) => return Err(schema("P0", "missing")),
    };
    let span = file.span.clone().unwrap_or_default();
    let t0 = span
        .t0
        .or(base.as_ref().map(|b| b.t0))
        .unwrap_or(0.0);
    let tf = span
        .tf
        .or(base.as_ref().map(|b| b.tf))
        .ok_or_else(|| schema("span.tf", "missing"))?;
    let mc_section = file.mc.clone().unwrap_or_default();
    let base_mc = base.as_ref().map(|b| b.mc).unwrap_or(DEFAULT_MC);
    let mc = MonteCarlo {
        n: mc_section.n.unwrap_or(base_mc.n),
        seed: mc_section.seed.unwrap_or(base_mc.seed),
    };
    let name = file
        .name
        .clone()
        .or(base.as_ref().map(|b| b.name.clone()))
        .unwrap_or_else(|| "custom".into());
    let metadata = file
        .metadata
        .clone()
        .or(base.as_ref().map(|b| b.metadata.clone()))
        .unwrap_or_default();
    let s = Scenario {
        name,
        model,
        x0,
        p0,
        t0,
        tf,
        mc,
        metadata,
    };
    s.validate()?;
    Ok(s)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario(&text)
}
