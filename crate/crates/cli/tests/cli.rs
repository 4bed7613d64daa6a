use std::fs;
use std::path::Path;
use std::process::Command;

use hotdogs::gmm::{GaussianMixture, SplitLibraryEntry};
use hotdogs::propagation::{Lineage, Mixand};
use hotdogs_cli::commands::{artifact_path, marginal_grid, run_cli, trace_rows};
use hotdogs_cli::{parse_table, Artifact, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK};
use nalgebra::{DMatrix, DVector};

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["hotdogs"];
    full.extend_from_slice(args);
    let code = run_cli(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn library_command() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.json");
    assert_eq!(cli(&["library", "--ls", "1", "--lambda", "0.3", "--out", path(&one)]).0, EXIT_OK);
    let entry = SplitLibraryEntry::from_json(&fs::read_to_string(&one).unwrap()).unwrap();
    assert_eq!(entry.triples, vec![[1.0, 0.0, 1.0]]);

    let three = dir.path().join("three.json");
    assert_eq!(cli(&["library", "--ls", "3", "--lambda", "1e-4", "--out", path(&three)]).0, EXIT_OK);
    assert_eq!(fs::read_to_string(&three).unwrap(), SplitLibraryEntry::default_entry().to_json());

    let (code, _, err) = cli(&["library", "--ls", "4"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("odd"), "{err}");
}

#[test]
fn run_none_on_geo() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = cli(&[
        "run", "--scenario", "geo", "--method", "none", "--samples", "500", "--out", path(dir.path()),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let rows = parse_table(&out).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].label, "none");
    assert_eq!(rows[0].relative_time, Some(1.0));
    assert!(rows[0].metrics.mcr >= 1.0);
    assert_eq!(fs::read_to_string(dir.path().join("results.csv")).unwrap(), out);
    let a = Artifact::load(&dir.path().join("none.json")).unwrap();
    assert_eq!(a.result.mixture.len(), 1);
    assert_eq!(a.provenance.samples, 500);
    assert_eq!(a.provenance.config_hash.len(), 64);
    assert_eq!(a.provenance.library_key, "L_s=3,lambda=1e-4");
    assert_eq!(a.provenance.integrator.rtol, 1e-12);
}

#[test]
fn immediate_ussolc_on_geo_gives_27() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = cli(&[
        "run", "--scenario", "geo", "--method", "USSOLC", "--depth", "4", "--samples", "500", "--out",
        path(dir.path()),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let a = Artifact::load(&dir.path().join("USSOLC.json")).unwrap();
    assert_eq!(a.result.mixture.len(), 27);
    assert!((a.result.mixture.total_weight() - 1.0).abs() < 1e-12);
    assert_eq!(a.relative_time, 1.0);
}

#[test]
fn deferred_ds1_is_faster_than_immediate_on_butterfly() {
    let (code, out, err) = cli(&[
        "run", "--scenario", "butterfly", "--method", "WUSSOLC", "--variant", "DS1", "--epsilon", "0.25",
        "--samples", "200",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let rows = parse_table(&out).unwrap();
    assert_eq!(rows[0].label, "DS1-WUSSOLC");
    assert!(rows[0].relative_time.unwrap() < 1.0, "{out}");
}

#[test]
fn compare_is_deterministic_and_has_original_row() {
    let args = [
        "compare", "--scenario", "geo", "--method", "FOS,FOS", "--method", "DS2:FOS:0.5", "--depth", "3",
        "--samples", "400", "--seed", "7",
    ];
    let (code, first, err) = cli(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    let (_, second, _) = cli(&args);
    let a = parse_table(&first).unwrap();
    let b = parse_table(&second).unwrap();
    assert_eq!(a.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), ["original", "FOS", "FOS", "DS2-FOS@0.5"]);
    assert!(a[0].relative_time.is_none());
    assert_eq!(a[1].metrics, a[2].metrics);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.metrics, y.metrics);
    }
    let strip = |t: &str| t.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&first), strip(&second));
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "scenario = \"geo\"\nmethods = [\"MAXVAR\"]\ndepth = 2\nsamples = 300\n").unwrap();
    let out_dir = dir.path().join("out");
    let (code, _, err) = cli(&["run", "--config", path(&cfg), "--depth", "3", "--out", path(&out_dir)]);
    assert_eq!(code, EXIT_OK, "{err}");
    let a = Artifact::load(&out_dir.join("MAXVAR.json")).unwrap();
    assert_eq!(a.result.mixture.len(), 9);
    assert_eq!(a.provenance.samples, 300);

    fs::write(&cfg, "scenario = \"geo\"\nmethod = \"FOS\"\n").unwrap();
    let (code, _, err) = cli(&["run", "--config", path(&cfg)]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("method"), "{err}");
}

#[test]
fn config_errors_exit_2() {
    assert_eq!(cli(&["run", "--scenario", "halo", "--method", "FOS"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["run", "--scenario", "geo", "--method", "NOPE"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["run", "--scenario", "geo", "--method", "FOS", "--order", "3"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["frobnicate"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["run", "--bogus"]).0, EXIT_CONFIG);
}

#[test]
fn numerical_failure_exits_3_and_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("plunge.toml");
    // Radial plunge into the central body: the integrator cannot pass r = 0.
    fs::write(
        &scenario,
        "x0 = [100.0, 0.0, 0.0, -1.0, 0.0, 0.0]\n[P0]\nidentity = 1e-6\n[model]\nkind = \"two_body\"\nmu = 398600.4418\n[span]\ntf = 100.0\n[mc]\nN = 10\nseed = 1\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let (code, _, err) = cli(&["run", "--scenario", path(&scenario), "--method", "none", "--out", path(&out_dir)]);
    assert_eq!(code, EXIT_NUMERICAL, "{err}");
    assert!(!out_dir.exists() || fs::read_dir(&out_dir).unwrap().next().is_none());
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_hotdogs");
    let ok = Command::new(bin).args(["library", "--ls", "1"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("\"triples\""));
    let bad = Command::new(bin).args(["run", "--scenario", "nowhere"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(EXIT_CONFIG));
}

fn standard_normal_artifact(dir: &Path) -> std::path::PathBuf {
    let (code, _, err) = cli(&[
        "compare", "--scenario", "geo", "--method", "none", "--samples", "100", "--out", path(dir),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let file = artifact_path(dir, 0, "none");
    let mut a = Artifact::load(&file).unwrap();
    let n = 6;
    let mut cov = DMatrix::identity(n, n);
    cov[(1, 1)] = 4.0;
    a.result.mixture = GaussianMixture::new(vec![
        Mixand::new(1.0, DVector::from_element(n, 1.0), cov, Lineage::root()).unwrap(),
    ])
    .unwrap();
    fs::write(&file, a.to_json()).unwrap();
    file
}

#[test]
fn marginals_of_single_gaussian() {
    let dir = tempfile::tempdir().unwrap();
    let file = standard_normal_artifact(dir.path());
    let csv_path = dir.path().join("grid.csv");
    let (code, _, err) = cli(&[
        "marginals", "--artifact", path(&file), "--axes", "0,1", "--grid", "81", "--extent", "6", "--out",
        path(&csv_path),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let text = fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("x,y,density\n"));
    let rows: Vec<(f64, f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[1], v[2])
        })
        .collect();
    assert_eq!(rows.len(), 81 * 81);
    let peak = rows.iter().cloned().fold((0.0, 0.0, 0.0), |a, r| if r.2 > a.2 { r } else { a });
    assert_eq!((peak.0, peak.1), (1.0, 1.0));
    let expected = 1.0 / (2.0 * std::f64::consts::PI * 2.0);
    assert!((peak.2 - expected).abs() < 1e-14);
    let (dx, dy) = (12.0 / 80.0, 24.0 / 80.0);
    let mass: f64 = rows.iter().map(|r| r.2).sum::<f64>() * dx * dy;
    assert!((mass - 1.0).abs() < 0.01, "{mass}");

    let bad = cli(&["marginals", "--artifact", path(&file), "--axes", "0,9"]);
    assert_eq!(bad.0, EXIT_CONFIG);
}

#[test]
fn geo_fos_marginal_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = cli(&[
        "run", "--scenario", "geo", "--method", "FOS", "--depth", "4", "--samples", "100", "--out",
        path(dir.path()),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let a = Artifact::load(&dir.path().join("FOS.json")).unwrap();
    let grid = marginal_grid(&a, (0, 1), (21, 21), 4.0).unwrap();
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/geo_fos_marginal.csv");
    let golden: Vec<Vec<f64>> = fs::read_to_string(&golden_path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(golden.len(), grid.len());
    let peak = grid.iter().map(|r| r.2).fold(0.0, f64::max);
    for (g, r) in golden.iter().zip(&grid) {
        assert!((g[0] - r.0).abs() <= 1e-9 * g[0].abs().max(1.0));
        assert!((g[1] - r.1).abs() <= 1e-9 * g[1].abs().max(1.0));
        assert!((g[2] - r.2).abs() <= 1e-9 * peak, "{g:?} vs {r:?}");
    }
}

#[test]
fn trace_of_unsplit_deferred_run_is_single_root_series() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = cli(&[
        "run", "--scenario", "geo", "--method", "DS3:WUSSOLC:1e9", "--depth", "4", "--samples", "100", "--out",
        path(dir.path()),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let file = dir.path().join("DS3-WUSSOLC_1000000000.json");
    let a = Artifact::load(&file).unwrap();
    assert_eq!(a.result.mixture.len(), 1);
    let rows = trace_rows(&a, false).unwrap();
    assert!(rows.iter().all(|r| r.1 == 1 && r.2 == "r"));
    assert_eq!(rows.len(), 64);
    let (code, out, _) = cli(&["trace", "--artifact", path(&file)]);
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("t,depth,lineage,value\n"));
    assert_eq!(out.lines().count(), 65);

    let none_dir = tempfile::tempdir().unwrap();
    let (code, _, _) = cli(&["run", "--scenario", "geo", "--method", "none", "--samples", "100", "--out", path(none_dir.path())]);
    assert_eq!(code, EXIT_OK);
    let (code, _, err) = cli(&["trace", "--artifact", path(&none_dir.path().join("none.json"))]);
    assert_eq!(code, EXIT_CONFIG, "{err}");
}

#[test]
fn mc_truth_round_trip_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.csv");
    let (code, _, err) = cli(&["mc-truth", "--scenario", "geo", "--samples", "300", "--seed", "5", "--out", path(&truth)]);
    assert_eq!(code, EXIT_OK, "{err}");
    let text = fs::read_to_string(&truth).unwrap();
    assert!(text.starts_with("t,x1,x2,x3,x4,x5,x6\n"));
    assert_eq!(text.lines().count(), 301);
    let base = ["run", "--scenario", "geo", "--method", "none", "--samples", "300", "--seed", "5"];
    let (_, fresh, _) = cli(&base);
    let mut with_file = base.to_vec();
    with_file.extend(["--truth", path(&truth)]);
    let (code, reused, err) = cli(&with_file);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(parse_table(&fresh).unwrap()[0].metrics, parse_table(&reused).unwrap()[0].metrics);
}

#[test]
fn central_chain_trace_keeps_only_central_lineages() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = cli(&[
        "run", "--scenario", "butterfly", "--method", "DS3:WUSSOLC", "--depth", "3", "--samples", "100", "--out",
        path(dir.path()),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let a = Artifact::load(&dir.path().join("DS3-WUSSOLC.json")).unwrap();
    let all = trace_rows(&a, false).unwrap();
    let chain = trace_rows(&a, true).unwrap();
    assert!(chain.len() < all.len());
    let mut lineages: Vec<&str> = chain.iter().map(|r| r.2.as_str()).collect();
    lineages.dedup();
    assert_eq!(lineages, ["r", "r.1", "r.1.1"]);
}
