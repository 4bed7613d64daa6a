//! Experiment driver: runs splitting methods on scenarios, scores them
//! against Monte Carlo truth and writes plot-ready CSV and JSON artifacts.

// `!(x > 0.0)` guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod method;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hotdogs::gmm::{GaussianMixture, GmmError};
use hotdogs::heuristics::HeuristicKind;
use hotdogs::hotdogs::{
    hotdogs_run, immediate_run, unsplit_run, HotdogsConfig, HotdogsError, RunResult, Variant,
    WhiteningPolicy,
};
use hotdogs::integrator::IntegratorOptions;
use hotdogs::metrics::{evaluate, mc_truth, sample_mixture, MademNorm, MetricsError, MetricsReport, SampleSet};
use hotdogs::propagation::{Lineage, Mixand};
use hotdogs::scenarios::{builtin_scenario, load_scenario, Scenario, ScenarioError, BUILTIN_NAMES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use method::Method;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const CSV_HEADER: &str = "Method,MaDEM,CvMnorm,MCR,RelativeTime";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Config(_) | CliError::Io { .. } => EXIT_CONFIG,
        }
    }

    fn io(path: &Path, e: impl ToString) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Propagation(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<HotdogsError> for CliError {
    fn from(e: HotdogsError) -> Self {
        match e.root_cause() {
            HotdogsError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Format(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<GmmError> for CliError {
    fn from(e: GmmError) -> Self {
        match e {
            GmmError::EvenComponentCount(_) | GmmError::InvalidLambda(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

/// Run settings shared by `run` and `compare`. Loaded from `--config` and
/// overridden by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Builtin name or path to a scenario file.
    pub scenario: Option<String>,
    pub methods: Vec<String>,
    /// Turns a plain heuristic `--method` into a deferred run.
    pub variant: Option<Variant>,
    pub epsilon: f64,
    pub depth: usize,
    pub order: u8,
    pub l_s: usize,
    pub lambda: f64,
    pub checkpoints: usize,
    pub w_min: f64,
    pub whitening: WhiteningPolicy,
    pub madem_norm: MademNorm,
    /// Overrides the scenario's Monte Carlo sample count.
    pub samples: Option<usize>,
    /// Overrides the scenario's Monte Carlo seed.
    pub seed: Option<u64>,
    /// Precomputed truth samples (from `mc-truth`).
    pub truth: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            scenario: None,
            methods: Vec::new(),
            variant: None,
            epsilon: 0.25,
            depth: 4,
            order: 1,
            l_s: 3,
            lambda: 1e-4,
            checkpoints: 64,
            w_min: 0.0,
            whitening: WhiteningPolicy::FrozenRoot,
            madem_norm: MademNorm::Mixture,
            samples: None,
            seed: None,
            truth: None,
        }
    }
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("run config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Splitting configuration for `method`; `None` uses a depth-1 WUSSOLC
    /// configuration so that its root criterion can still be traced.
    pub fn hotdogs_config(&self, method: &Method) -> Result<HotdogsConfig, CliError> {
        let (kind, variant, epsilon, depth) = match *method {
            Method::None => (HeuristicKind::Wussolc, Variant::DS3, self.epsilon, 1),
            Method::Immediate { kind } => (kind, Variant::DS3, 0.0, self.depth),
            Method::Deferred {
                variant,
                kind,
                epsilon,
            } => (kind, variant, epsilon.unwrap_or(self.epsilon), self.depth),
        };
        let mut cfg = HotdogsConfig::new(kind, variant, epsilon, depth);
        cfg.moment_order = self.order;
        cfg.l_s = self.l_s;
        cfg.lambda = self.lambda;
        cfg.checkpoints = self.checkpoints;
        cfg.w_min = self.w_min;
        cfg.whitening = self.whitening;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>, CliError> {
        if self.methods.is_empty() {
            return Err(CliError::Config("no method given (use --method)".into()));
        }
        self.methods.iter().map(|m| m.parse()).collect()
    }
}

pub fn resolve_scenario(reference: &str) -> Result<Scenario, CliError> {
    if BUILTIN_NAMES.contains(&reference.trim().to_ascii_lowercase().as_str()) {
        return Ok(builtin_scenario(reference)?);
    }
    let path = Path::new(reference);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "scenario {reference:?} is neither a builtin ({}) nor an existing file",
            BUILTIN_NAMES.join(", ")
        )));
    }
    Ok(load_scenario(path)?)
}

/// Scenario with the sample count and seed overrides applied.
pub fn scenario_for(settings: &Settings) -> Result<Scenario, CliError> {
    let name = settings
        .scenario
        .as_deref()
        .ok_or_else(|| CliError::Config("no scenario given (use --scenario)".into()))?;
    let mut s = resolve_scenario(name)?;
    if let Some(n) = settings.samples {
        s.mc.n = n;
    }
    if let Some(seed) = settings.seed {
        s.mc.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

pub fn initial_mixture(s: &Scenario) -> Result<GaussianMixture, CliError> {
    Ok(GaussianMixture::single(s.x0.clone(), s.p0.clone())?)
}

pub fn root_mixand(s: &Scenario) -> Result<Mixand, CliError> {
    Mixand::new(1.0, s.x0.clone(), s.p0.clone(), Lineage::root())
        .map_err(|e| CliError::Config(format!("scenario P0: {e}")))
}

/// Truth samples at `tf`, read from `settings.truth` or generated.
pub fn truth_samples(s: &Scenario, settings: &Settings) -> Result<SampleSet, CliError> {
    if let Some(path) = &settings.truth {
        let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        let set = SampleSet::read_csv(file, s.mc.seed)?;
        if set.dim() != s.x0.len() || (set.t - s.tf).abs() > 1e-9 * s.tf.abs().max(1.0) {
            return Err(CliError::Config(format!(
                "truth file {} does not match scenario {} (epoch {} vs {})",
                path.display(),
                s.name,
                set.t,
                s.tf
            )));
        }
        return Ok(set);
    }
    Ok(mc_truth(
        &s.model,
        &initial_mixture(s)?,
        s.mc.n,
        s.mc.seed,
        s.t0,
        s.tf,
        &IntegratorOptions::default(),
    )?)
}

/// The initial Gaussian scored against its own un-propagated draws (the
/// same draws the truth set starts from): the sampling-noise floor.
pub fn original_row(s: &Scenario, norm: MademNorm) -> Result<MetricsReport, CliError> {
    let gm = initial_mixture(s)?;
    let samples = SampleSet::new(s.t0, s.mc.seed, sample_mixture(&gm, s.mc.n, s.mc.seed)?)?;
    Ok(evaluate(&gm, &samples, norm)?)
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub config: HotdogsConfig,
    pub result: RunResult,
    /// Wall time of propagation and splitting only.
    pub seconds: f64,
}

pub fn execute(s: &Scenario, method: &Method, settings: &Settings) -> Result<MethodRun, CliError> {
    let config = settings.hotdogs_config(method)?;
    let root = root_mixand(s)?;
    let start = Instant::now();
    let result = match method {
        Method::None => unsplit_run(&root, &s.model, s.t0, s.tf, &config)?,
        Method::Immediate { .. } => immediate_run(&root, &s.model, s.t0, s.tf, &config)?,
        Method::Deferred { .. } => hotdogs_run(&root, &s.model, s.t0, s.tf, &config)?,
    };
    let seconds = start.elapsed().as_secs_f64();
    Ok(MethodRun {
        method: *method,
        config,
        result,
        seconds,
    })
}

/// Seconds of the immediate-splitting reference for a method list: the first
/// immediate entry if present, otherwise a timed immediate run of the first
/// deferred entry's heuristic. A list of only `none` is its own reference.
pub fn reference_seconds(
    s: &Scenario,
    settings: &Settings,
    runs: &[MethodRun],
) -> Result<f64, CliError> {
    if let Some(r) = runs.iter().find(|r| matches!(r.method, Method::Immediate { .. })) {
        return Ok(r.seconds);
    }
    if let Some(kind) = runs.iter().find_map(|r| r.method.kind()) {
        return Ok(execute(s, &Method::Immediate { kind }, settings)?.seconds);
    }
    Ok(runs.first().map(|r| r.seconds).unwrap_or(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the resolved scenario, settings and method.
    pub config_hash: String,
    pub scenario: String,
    pub seed: u64,
    pub samples: usize,
    pub library_key: String,
    pub integrator: IntegratorOptions,
    pub madem_norm: MademNorm,
    pub version: String,
}

impl Provenance {
    pub fn new(s: &Scenario, settings: &Settings, method: &Method, cfg: &HotdogsConfig) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(s.to_toml().as_bytes());
        hasher.update(serde_json::to_vec(settings).expect("settings serialize"));
        hasher.update(serde_json::to_vec(method).expect("method serializes"));
        hasher.update(serde_json::to_vec(cfg).expect("config serializes"));
        Self {
            config_hash: hex::encode(hasher.finalize()),
            scenario: s.name.clone(),
            seed: s.mc.seed,
            samples: s.mc.n,
            library_key: format!("L_s={},lambda={:e}", cfg.l_s, cfg.lambda),
            integrator: cfg.integrator,
            madem_norm: settings.madem_norm,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Everything a run produced, as written to `<label>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub method: String,
    pub method_spec: Method,
    pub metrics: MetricsReport,
    pub relative_time: f64,
    pub runtime_s: f64,
    pub provenance: Provenance,
    pub config: HotdogsConfig,
    pub result: RunResult,
}

impl Artifact {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("run artifact {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifact serializes")
    }
}

/// One line of the results table; `original` has no runtime.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub metrics: MetricsReport,
    pub relative_time: Option<f64>,
}

pub fn format_table(rows: &[Row]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.metrics.madem.to_string(),
            r.metrics.cvm_norm.to_string(),
            r.metrics.mcr.to_string(),
            r.relative_time.map(|t| t.to_string()).unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

/// Parses a table produced by [`format_table`].
pub fn parse_table(text: &str) -> Result<Vec<Row>, CliError> {
    let bad = |m: String| CliError::Config(format!("results table: {m}"));
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(bad("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("{}: {e}", &rec[i])))
        };
        rows.push(Row {
            label: rec[0].to_string(),
            metrics: MetricsReport {
                madem: num(1)?,
                cvm_norm: num(2)?,
                mcr: num(3)?,
            },
            relative_time: if rec[4].is_empty() { None } else { Some(num(4)?) },
        });
    }
    Ok(rows)
}

/// Files staged in memory and written together, so a failed command leaves
/// nothing behind.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: PathBuf, contents: impl Into<Vec<u8>>) {
        self.files.push((path, contents.into()));
    }

    pub fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let mut written: Vec<PathBuf> = Vec::new();
        let result = (|| {
            for (path, data) in &self.files {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
                }
                let tmp = path.with_extension("partial");
                fs::write(&tmp, data).map_err(|e| CliError::io(&tmp, e))?;
                fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
                written.push(path.clone());
            }
            Ok(())
        })();
        match result {
            Ok(()) => Ok(written),
            Err(e) => {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                Err(e)
            }
        }
    }
}

/// File-name-safe form of a method label.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
