//! Subcommands: run, compare, marginals, library, trace, mc-truth.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hotdogs::gmm::{generate_split_library, SplitLibraryEntry};
use hotdogs::hotdogs::{Variant, WhiteningPolicy};
use hotdogs::metrics::{evaluate, MademNorm};

use crate::{
    execute, file_stem, format_table, original_row, reference_seconds, scenario_for,
    truth_samples, Artifact, CliError, Method, MethodRun, Outputs, Provenance, Row, Settings,
    EXIT_OK,
};

#[derive(Debug, Parser)]
#[command(name = "hotdogs", version, about = "Gaussian-mixture orbit uncertainty propagation with deferred splitting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one method and score it against Monte Carlo truth.
    Run(RunArgs),
    /// Score several methods against one shared truth set.
    Compare(CompareArgs),
    /// Grid the 2-D marginal density of a run's final mixture.
    Marginals(MarginalsArgs),
    /// Generate a univariate split library.
    Library(LibraryArgs),
    /// Export the weighted criterion series logged by a run.
    Trace(TraceArgs),
    /// Generate and save Monte Carlo truth samples.
    McTruth(McTruthArgs),
}

/// Settings shared by the scenario-driven commands; each flag overrides the
/// matching key of `--config`.
#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Builtin scenario (geo, molniya, butterfly) or scenario file path.
    #[arg(long)]
    pub scenario: Option<String>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weighted criterion tolerance for deferred methods.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Maximum split depth, root = 1.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Moment propagation order (1 or 2).
    #[arg(long)]
    pub order: Option<u8>,
    /// Monte Carlo seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo sample count.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Reuse truth samples written by `mc-truth`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Checkpoints per leg.
    #[arg(long)]
    pub checkpoints: Option<usize>,
    /// Minimum weight a mixand needs to split.
    #[arg(long)]
    pub w_min: Option<f64>,
    /// Split library component count.
    #[arg(long = "ls")]
    pub l_s: Option<usize>,
    /// Split library regularization weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Whitening of split trees: frozen_root or refresh.
    #[arg(long, value_parser = parse_whitening)]
    pub whitening: Option<WhiteningPolicy>,
    /// Covariance defining the MaDEM norm: mixture or sample.
    #[arg(long, value_parser = parse_madem_norm)]
    pub madem_norm: Option<MademNorm>,
}

fn parse_whitening(s: &str) -> Result<WhiteningPolicy, String> {
    match s {
        "frozen_root" => Ok(WhiteningPolicy::FrozenRoot),
        "refresh" => Ok(WhiteningPolicy::Refresh),
        _ => Err("expected frozen_root or refresh".into()),
    }
}

fn parse_madem_norm(s: &str) -> Result<MademNorm, String> {
    match s {
        "mixture" => Ok(MademNorm::Mixture),
        "sample" => Ok(MademNorm::Sample),
        _ => Err("expected mixture or sample".into()),
    }
}

impl CommonArgs {
    pub fn settings(&self) -> Result<Settings, CliError> {
        let mut s = match &self.config {
            Some(path) => Settings::load(path)?,
            None => Settings::default(),
        };
        macro_rules! take {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field.clone() { s.$target = v; })*
            };
        }
        take!(epsilon => epsilon, depth => depth, order => order, checkpoints => checkpoints,
              w_min => w_min, l_s => l_s, lambda => lambda);
        if let Some(v) = &self.scenario {
            s.scenario = Some(v.clone());
        }
        if let Some(v) = self.seed {
            s.seed = Some(v);
        }
        if let Some(v) = self.samples {
            s.samples = Some(v);
        }
        if let Some(v) = &self.truth {
            s.truth = Some(v.clone());
        }
        if let Some(v) = self.whitening {
            s.whitening = v;
        }
        if let Some(v) = self.madem_norm {
            s.madem_norm = v;
        }
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// none, a heuristic (immediate), VARIANT:KIND or VARIANT:KIND:EPS.
    #[arg(long)]
    pub method: Option<String>,
    /// Deferred variant applied to a plain heuristic method.
    #[arg(long)]
    pub variant: Option<String>,
    /// Output directory for results.csv and the run artifact.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Methods in table order; repeat the flag or separate with commas.
    #[arg(long, value_delimiter = ',')]
    pub method: Vec<String>,
    /// Output directory for compare.csv and one artifact per method.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MarginalsArgs {
    /// Run artifact (JSON) written by run or compare.
    #[arg(long)]
    pub artifact: PathBuf,
    /// Two state axes, zero-based.
    #[arg(long, default_value = "0,1", value_delimiter = ',')]
    pub axes: Vec<usize>,
    /// Grid points per axis: N or NX,NY.
    #[arg(long, default_value = "101", value_delimiter = ',')]
    pub grid: Vec<usize>,
    /// Half-width of the grid in standard deviations of the overall mixture.
    #[arg(long, default_value_t = 5.0)]
    pub extent: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LibraryArgs {
    #[arg(long = "ls", default_value_t = 3)]
    pub l_s: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Run artifact (JSON) of a deferred run.
    #[arg(long)]
    pub artifact: PathBuf,
    /// Keep only the root and its chain of central children.
    #[arg(long)]
    pub central_chain: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct McTruthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output CSV (t, x1..x6).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the process exit code.
/// Tables go to `stdout`, diagnostics to `stderr`.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Run(a) => cmd_run(a, stdout),
        Command::Compare(a) => cmd_compare(a, stdout),
        Command::Marginals(a) => cmd_marginals(a, stdout),
        Command::Library(a) => cmd_library(a, stdout),
        Command::Trace(a) => cmd_trace(a, stdout),
        Command::McTruth(a) => cmd_mc_truth(a, stdout),
    }
}

fn emit(out: &Option<PathBuf>, text: String, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(path) => {
            let mut o = Outputs::default();
            o.add(path.clone(), text);
            o.commit()?;
            Ok(())
        }
        None => stdout.write_all(text.as_bytes()).map_err(|e| CliError::Io {
            path: "<stdout>".into(),
            message: e.to_string(),
        }),
    }
}

fn write_stdout(stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    stdout.write_all(text.as_bytes()).map_err(|e| CliError::Io {
        path: "<stdout>".into(),
        message: e.to_string(),
    })
}

fn artifact_for(
    run: &MethodRun,
    metrics: hotdogs::metrics::MetricsReport,
    relative_time: f64,
    scenario: &hotdogs::scenarios::Scenario,
    settings: &Settings,
) -> Artifact {
    Artifact {
        method: run.method.label(),
        method_spec: run.method,
        metrics,
        relative_time,
        runtime_s: run.seconds,
        provenance: Provenance::new(scenario, settings, &run.method, &run.config),
        config: run.config,
        result: run.result.clone(),
    }
}

pub fn cmd_run(args: RunArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut settings = args.common.settings()?;
    if let Some(m) = args.method {
        settings.methods = vec![m];
    }
    if let Some(v) = &args.variant {
        settings.variant = Some(v.parse::<Variant>()?);
    }
    let methods = settings.parsed_methods()?;
    if methods.len() != 1 {
        return Err(CliError::Config(format!(
            "run takes one method, got {}; use compare for several",
            methods.len()
        )));
    }
    let method = match (methods[0], settings.variant) {
        (Method::Immediate { kind }, Some(variant)) => Method::Deferred {
            variant,
            kind,
            epsilon: None,
        },
        (m, _) => m,
    };
    let scenario = scenario_for(&settings)?;
    let truth = truth_samples(&scenario, &settings)?;
    let run = execute(&scenario, &method, &settings)?;
    let reference = match method {
        Method::Deferred { .. } => reference_seconds(&scenario, &settings, std::slice::from_ref(&run))?,
        _ => run.seconds,
    };
    let metrics = evaluate(&run.result.mixture, &truth, settings.madem_norm)?;
    let relative = run.seconds / reference;
    let table = format_table(&[Row {
        label: method.label(),
        metrics,
        relative_time: Some(relative),
    }]);
    if let Some(dir) = &args.out {
        let artifact = artifact_for(&run, metrics, relative, &scenario, &settings);
        let mut o = Outputs::default();
        o.add(dir.join("results.csv"), table.clone());
        o.add(dir.join(format!("{}.json", file_stem(&method.label()))), artifact.to_json());
        o.commit()?;
    }
    write_stdout(stdout, &table)
}

/// Runs every method of `settings` against one truth set. Returns the table
/// rows (original first) and one artifact per method.
pub fn compare(settings: &Settings) -> Result<(Vec<Row>, Vec<Artifact>), CliError> {
    let methods = settings.parsed_methods()?;
    let scenario = scenario_for(settings)?;
    let truth = truth_samples(&scenario, settings)?;
    let mut runs = Vec::with_capacity(methods.len());
    for m in &methods {
        runs.push(execute(&scenario, m, settings)?);
    }
    let reference = reference_seconds(&scenario, settings, &runs)?;
    let mut rows = vec![Row {
        label: "original".into(),
        metrics: original_row(&scenario, settings.madem_norm)?,
        relative_time: None,
    }];
    let mut artifacts = Vec::with_capacity(runs.len());
    for run in &runs {
        let metrics = evaluate(&run.result.mixture, &truth, settings.madem_norm)?;
        let relative = run.seconds / reference;
        rows.push(Row {
            label: run.method.label(),
            metrics,
            relative_time: Some(relative),
        });
        artifacts.push(artifact_for(run, metrics, relative, &scenario, settings));
    }
    Ok((rows, artifacts))
}

pub fn cmd_compare(args: CompareArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut settings = args.common.settings()?;
    if !args.method.is_empty() {
        settings.methods = args.method;
    }
    let (rows, artifacts) = compare(&settings)?;
    let table = format_table(&rows);
    if let Some(dir) = &args.out {
        let mut o = Outputs::default();
        o.add(dir.join("compare.csv"), table.clone());
        for (i, a) in artifacts.iter().enumerate() {
            o.add(dir.join(format!("{:02}-{}.json", i + 1, file_stem(&a.method))), a.to_json());
        }
        o.commit()?;
    }
    write_stdout(stdout, &table)
}

/// `(x, y, density)` rows of the 2-D marginal of the artifact's mixture.
pub fn marginal_grid(
    artifact: &Artifact,
    axes: (usize, usize),
    grid: (usize, usize),
    extent: f64,
) -> Result<Vec<(f64, f64, f64)>, CliError> {
    let gm = &artifact.result.mixture;
    let n = gm.dim();
    let (a, b) = axes;
    if a >= n || b >= n || a == b {
        return Err(CliError::Config(format!(
            "axes must be two distinct indices below {n}, got {a},{b}"
        )));
    }
    if grid.0 < 2 || grid.1 < 2 || !(extent > 0.0) {
        return Err(CliError::Config("grid needs at least 2 points per axis and a positive extent".into()));
    }
    let mean = gm.mean();
    let cov = gm.covariance();
    let axis = |i: usize, count: usize| -> Vec<f64> {
        let half = extent * cov[(i, i)].sqrt();
        (0..count)
            .map(|k| mean[i] - half + 2.0 * half * k as f64 / (count - 1) as f64)
            .collect()
    };
    let xs = axis(a, grid.0);
    let ys = axis(b, grid.1);
    let mut rows = Vec::with_capacity(xs.len() * ys.len());
    for &x in &xs {
        for &y in &ys {
            let d = gm
                .marginal_pdf_2d(a, b, x, y)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            rows.push((x, y, d));
        }
    }
    Ok(rows)
}

fn csv_text(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

pub fn cmd_marginals(args: MarginalsArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let artifact = Artifact::load(&args.artifact)?;
    let grid = match args.grid.as_slice() {
        [n] => (*n, *n),
        [nx, ny] => (*nx, *ny),
        _ => return Err(CliError::Config("grid takes N or NX,NY".into())),
    };
    let axes = match args.axes.as_slice() {
        [a, b] => (*a, *b),
        _ => return Err(CliError::Config("axes takes exactly two indices".into())),
    };
    let rows = marginal_grid(&artifact, axes, grid, args.extent)?;
    let text = csv_text(
        &["x", "y", "density"],
        rows.into_iter()
            .map(|(x, y, d)| vec![x.to_string(), y.to_string(), format!("{d:e}")]),
    );
    emit(&args.out, text, stdout)
}

pub fn cmd_library(args: LibraryArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let entry: SplitLibraryEntry = generate_split_library(args.l_s, args.lambda)?;
    emit(&args.out, entry.to_json(), stdout)
}

/// `(t, depth, lineage, w·F)` rows of a run's criterion traces.
pub fn trace_rows(artifact: &Artifact, central_chain: bool) -> Result<Vec<(f64, usize, String, f64)>, CliError> {
    let traces = &artifact.result.traces;
    if traces.is_empty() {
        return Err(CliError::Config(format!(
            "artifact for {} logged no criterion trace",
            artifact.method
        )));
    }
    let central = (artifact.config.l_s / 2) as u16;
    let mut rows = Vec::new();
    for tr in traces {
        if central_chain && tr.lineage.0.iter().any(|&i| i != central) {
            continue;
        }
        for (t, v) in tr.times.iter().zip(&tr.values) {
            rows.push((*t, tr.depth, tr.lineage.to_string(), *v));
        }
    }
    Ok(rows)
}

pub fn cmd_trace(args: TraceArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let artifact = Artifact::load(&args.artifact)?;
    let rows = trace_rows(&artifact, args.central_chain)?;
    let text = csv_text(
        &["t", "depth", "lineage", "value"],
        rows.into_iter()
            .map(|(t, d, l, v)| vec![t.to_string(), d.to_string(), l, v.to_string()]),
    );
    emit(&args.out, text, stdout)
}

pub fn cmd_mc_truth(args: McTruthArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut settings = args.common.settings()?;
    settings.truth = None;
    let scenario = scenario_for(&settings)?;
    let truth = truth_samples(&scenario, &settings)?;
    let mut buf = Vec::new();
    truth.write_csv(&mut buf)?;
    emit(&args.out, String::from_utf8(buf).expect("utf-8 output"), stdout)
}

/// Exposed for tests that build an artifact path from a compare run.
pub fn artifact_path(dir: &Path, index: usize, label: &str) -> PathBuf {
    dir.join(format!("{:02}-{}.json", index + 1, file_stem(label)))
}
