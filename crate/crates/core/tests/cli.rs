use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use csg_emos::io::{read_coefficients, read_forecasts, read_reforecasts};

const SCENARIO: [&str; 10] = [
    "--set",
    "scenario.n_locations=16",
    "--set",
    "scenario.n_days=40",
    "--set",
    "scenario.lead_days=[1,3]",
    "--set",
    "verify.n_boot=200",
    "--set",
    "mixtures=[{m_high=50, m_low=0}, {m_high=40, m_low=40}, {m_high=0, m_low=200}]",
];

fn csg_emos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csg-emos"))
        .args(args)
        .env("CSGEMOS_LOG", "error")
        .env_remove("CSGEMOS_CONFIG")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = csg_emos(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_scenario<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SCENARIO).collect()
}

struct Dataset {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Dataset {
    fn file(&self, name: &str) -> String {
        self.root.join("data").join(name).to_string_lossy().into_owned()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data").to_string_lossy().into_owned();
        run_ok(&with_scenario(&["simulate", "-o", &data]));
        Dataset { _dir: dir, root }
    })
}

fn run_in(name: &str, command: &str, extra: &[&str]) -> PathBuf {
    let d = dataset();
    let out = d.out(name);
    let (f, r) = (d.file("forecasts.csv"), d.file("reforecasts.csv"));
    let out_s = out.to_string_lossy().into_owned();
    let mut args = vec![command, "-o", &out_s, "--forecasts", &f, "--reforecasts", &r];
    args.extend_from_slice(extra);
    run_ok(&with_scenario(&args));
    out
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<BTreeMap<String, String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| {
            header
                .iter()
                .cloned()
                .zip(r.unwrap().iter().map(String::from))
                .collect()
        })
        .collect();
    (header, rows)
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

#[test]
fn simulate_output_parses_back_and_is_reproducible() {
    let d = dataset();
    let cases = read_forecasts(Path::new(&d.file("forecasts.csv")), Some(Path::new(&d.file("observations.csv")))).unwrap();
    assert_eq!(cases.len(), 16 * 40 * 2);
    // Mixture (40,40) is drawable from every case.
    assert!(cases.iter().all(|c| {
        let g = |r| c.forecast.group(r).map_or(0, |g| g.len());
        g(csg_emos::ensemble::Resolution::High) == 50 && g(csg_emos::ensemble::Resolution::Low) == 200
    }));
    let reforecasts = read_reforecasts(Path::new(&d.file("reforecasts.csv")), None).unwrap();
    assert!(!reforecasts.is_empty());

    let again = d.out("simulate-again");
    run_ok(&with_scenario(&["simulate", "-o", &again.to_string_lossy()]));
    for name in ["forecasts.csv", "observations.csv", "reforecasts.csv"] {
        let a = std::fs::read(d.root.join("data").join(name)).unwrap();
        let b = std::fs::read(again.join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
}

#[test]
fn fit_converges_and_freezes_pure_mixtures() {
    let out = run_in("fit", "fit", &[]);
    let rows = read_coefficients(&out.join("coefficients.csv")).unwrap();
    assert!(!rows.is_empty());
    let converged = rows.iter().filter(|r| r.converged).count();
    assert!(converged as f64 >= 0.95 * rows.len() as f64);
    for r in &rows {
        let m = r.mixture().unwrap();
        if m.m_low == 0 {
            assert_eq!(r.b_low, 0.0);
        }
        if m.m_high == 0 {
            assert_eq!(r.b_high, 0.0);
        }
    }
    let (header, clusters) = read_csv(&out.join("clusters.csv"));
    assert_eq!(header, ["mixture", "lead_time_h", "target_date", "location_id", "cluster_id"]);
    assert!(!clusters.is_empty());
}

#[test]
fn cluster_only_writes_assignments() {
    let out = run_in("cluster", "cluster", &[]);
    assert!(out.join("clusters.csv").is_file());
    assert!(!out.join("coefficients.csv").exists());
    let (_, rows) = read_csv(&out.join("clusters.csv"));
    // 3 mixtures x 2 leads x 10 target dates x 16 locations
    assert_eq!(rows.len(), 3 * 2 * 10 * 16);
}

#[test]
fn qm_weights_sum_to_one_per_case() {
    let out = run_in("qm", "qm", &["--set", "output.all_weight_dates=true"]);
    let (header, rows) = read_csv(&out.join("weights.csv"));
    assert_eq!(
        header,
        ["mixture", "location_id", "valid_time", "lead_time_h", "group", "member_rank", "weight"]
    );
    let mut sums: BTreeMap<(String, String, String, String), f64> = BTreeMap::new();
    for r in &rows {
        let key = (r["mixture"].clone(), r["location_id"].clone(), r["valid_time"].clone(), r["lead_time_h"].clone());
        *sums.entry(key).or_default() += num(r, "weight");
    }
    assert_eq!(sums.len(), 3 * 2 * 10 * 16);
    assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-12));

    let mapped = read_forecasts(&out.join("qm_forecasts.csv"), None).unwrap();
    assert_eq!(mapped.len(), 2 * 10 * 16);
    let (header, _) = read_csv(&out.join("histogram.csv"));
    assert_eq!(header, ["lead_time_h", "group", "mean_bin", "bin", "count"]);
}

#[test]
fn verify_reports_skill_against_raw() {
    let out = run_in("verify", "verify", &[]);
    let (header, rows) = read_csv(&out.join("report.csv"));
    assert_eq!(header, ["method", "lead_time_h", "mixture", "score_kind", "threshold", "mean", "ci_lo", "ci_hi"]);
    for r in rows.iter().filter(|r| r["method"] == "raw" && r["score_kind"].ends_with("ss")) {
        assert_eq!((num(r, "mean"), num(r, "ci_lo"), num(r, "ci_hi")), (0.0, 0.0, 0.0));
    }
    let crps = |method: &str, lead: &str, mixture: &str| {
        rows.iter()
            .find(|r| r["method"] == method && r["lead_time_h"] == lead && r["mixture"] == mixture && r["score_kind"] == "crps")
            .map(|r| num(r, "mean"))
            .unwrap()
    };
    for lead in ["30", "78"] {
        for mixture in ["(50,0)", "(40,40)", "(0,200)"] {
            assert!(crps("emos", lead, mixture) < crps("raw", lead, mixture), "{lead} {mixture}");
        }
    }
    for r in rows.iter().filter(|r| r["score_kind"] == "crps") {
        assert!(num(r, "ci_lo") <= num(r, "mean") && num(r, "mean") <= num(r, "ci_hi"));
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(!summary["significance"].as_array().unwrap().is_empty());
    assert!(out.join("reliability.csv").is_file());
}

#[test]
fn report_bundle_is_complete() {
    let out = run_in("report", "report", &[]);
    for name in [
        "config.toml", "report.csv", "reliability.csv", "curves.csv", "summary.json", "coefficients.csv",
        "clusters.csv", "histogram.csv", "weights.csv",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let (_, curves) = read_csv(&out.join("curves.csv"));
    // one point per method x mixture x lead
    assert_eq!(curves.len(), 4 * 3 * 2);
    let (_, rel) = read_csv(&out.join("reliability.csv"));
    assert!(rel.iter().any(|r| !r["log10_freq"].is_empty() && num(r, "log10_freq") <= 0.0));
    let cfg = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg.contains("window_days = 30") && cfg.contains("n_boot = 200"));
}

fn assert_single_line_error(out: &Output, code: i32, kind: &str) {
    assert_eq!(out.status.code(), Some(code));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    assert!(lines[0].starts_with(&format!("error kind={kind} code={code}: ")), "{stderr}");
}

#[test]
fn config_errors_exit_2() {
    assert_single_line_error(&csg_emos(&["fit"]), 2, "config");
    assert_single_line_error(&csg_emos(&["nonsense"]), 2, "config");
    assert_single_line_error(&csg_emos(&["fit", "--set", "emos.window_days=0"]), 2, "config");
    assert_single_line_error(&csg_emos(&["fit", "--set", "emos.bogus=1"]), 2, "config");
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("never");
    let out = csg_emos(&["fit", "--forecasts", "/nonexistent.csv", "-o", &out_dir.to_string_lossy()]);
    assert_single_line_error(&out, 2, "config");
    assert!(!out_dir.exists(), "failed run created its output directory");
    assert_single_line_error(&csg_emos(&["fit", "--config", "/nonexistent.toml"]), 2, "config");
    let out = Command::new(env!("CARGO_BIN_EXE_csg-emos"))
        .arg("config")
        .env("CSGEMOS__VERIFY__N_BOOT", "3")
        .output()
        .unwrap();
    assert_single_line_error(&out, 2, "config");
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(
        &bad,
        "location_id,valid_time,lead_time_h,obs_mm,group,member_idx,value_mm\nA,2017-05-01,30,1,high,0,-2\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = csg_emos(&["fit", "--forecasts", &bad.to_string_lossy(), "-o", &out_dir.to_string_lossy()]);
    assert_single_line_error(&out, 3, "data");

    // Too few days for a single training window.
    let d = dataset();
    let out = csg_emos(&[
        "fit",
        "--forecasts",
        &d.file("forecasts.csv"),
        "-o",
        &out_dir.to_string_lossy(),
        "--set",
        "emos.window_days=60",
    ]);
    assert_single_line_error(&out, 3, "data");
}

#[test]
fn config_subcommand_prints_effective_settings() {
    let out = Command::new(env!("CARGO_BIN_EXE_csg-emos"))
        .args(["config", "--set", "emos.clusters=7", "--seed", "5"])
        .env("CSGEMOS__QM__MEAN_BINS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 5"));
    assert!(text.contains("clusters = 7"));
    assert!(text.contains("mean_bins = 2"));
}
