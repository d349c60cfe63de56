use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qctc(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_qctc"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("out/summary.json")).unwrap()).unwrap()
}

/// Columns of a CSV file keyed by header.
fn columns(path: &Path) -> Vec<(String, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let mut cols: Vec<(String, Vec<f64>)> = header.into_iter().map(|h| (h, Vec::new())).collect();
    for rec in r.records() {
        for (c, v) in cols.iter_mut().zip(rec.unwrap().iter()) {
            c.1.push(v.parse().unwrap_or(f64::NAN));
        }
    }
    cols
}

const TWO_SITES: &str = r#"
[model]
delta = -6.0
omega_lower = 4.0
omega_upper = 6.0
chi = -18.0

[run]
solver = "SOLVER"
t_end = 10.0
window = 5.0

[lattice]
nx = 2
ny = 1
"#;

#[test]
fn exact_and_finite_cumulant_files_agree_for_two_sites() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = qctc(a.path(), &TWO_SITES.replace("SOLVER", "exact"), &["trace"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = qctc(b.path(), &TWO_SITES.replace("SOLVER", "cumulant_finite"), &["trace"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let ex = columns(&a.path().join("out/trace.csv"));
    let cu = columns(&b.path().join("out/trace.csv"));
    for name in ["t", "n_up", "n_0", "n_down", "f2"] {
        let x = &ex.iter().find(|c| c.0 == name).unwrap().1;
        let y = &cu.iter().find(|c| c.0 == name).unwrap().1;
        assert_eq!(x.len(), y.len());
        let err = x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{name}: {err}");
    }
    let s = summary(a.path());
    assert_eq!(s["solver"], "exact");
    assert_eq!(s["manifest"]["command"], "trace");
    assert_eq!(s["manifest"]["config"]["model"]["chi"], -18.0);
}

#[test]
fn meanfield_trace_at_stable_point_is_stationary() {
    let d = tempfile::tempdir().unwrap();
    let cfg = TWO_SITES.replace("SOLVER", "meanfield").replace("delta = -6.0", "delta = 20.0").replace("t_end = 10.0", "t_end = 200.0").replace("window = 5.0", "window = 50.0");
    let out = qctc(d.path(), &cfg, &["trace"]);
    assert!(out.status.success());
    assert!(summary(d.path())["delta2"].as_f64().unwrap() < 1e-8);
}

#[test]
fn schema_violation_reports_line_and_exits_with_config_code() {
    let d = tempfile::tempdir().unwrap();
    let cfg = TWO_SITES.replace("SOLVER", "exact").replace("nx = 2", "nx = 2\nbogus = 1");
    let out = qctc(d.path(), &cfg, &["trace"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus") && err.contains("line"), "{err}");

    let out = qctc(d.path(), &TWO_SITES.replace("SOLVER", "warp_drive"), &["trace"]);
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_qctc")).arg("trace").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

const SCAN: &str = r#"
[model]
delta = 0.0
omega_lower = 0.0
omega_upper = 6.0
chi = -18.0

[integrator]
dense_output_stride = 0.1

[lattice]
r_cut = 2.0

[scan]
delta = { min = -20.0, max = 20.0, n = 5 }
omega = { min = 0.0, max = 10.0, n = 5 }
mf_seeds = 2
mf_starts = 1
t_end = 20.0
window = 10.0
"#;

#[test]
fn coarse_scan_completes_and_resumes_identically() {
    let d = tempfile::tempdir().unwrap();
    let out = qctc(d.path(), SCAN, &["scan", "--workers", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.path().join("out/scan.csv")).unwrap();
    let mut r = csv::Reader::from_reader(csv.as_bytes());
    let h = r.headers().unwrap().clone();
    let idx = |k: &str| h.iter().position(|x| x == k).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 25);
    for row in &rows {
        // Short runs may leave a slow transient, which is flagged but not a failure.
        assert_ne!(&row[idx("status")], "failed");
        if row[idx("omega")].parse::<f64>().unwrap() == 0.0 {
            assert_eq!(&row[idx("mf_class")], "stable");
            assert_eq!(&row[idx("phase")], "stationary");
        }
    }
    assert_eq!(summary(d.path())["cells"], 25);

    let out = qctc(d.path(), SCAN, &["scan", "--workers", "1", "--resume"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(d.path().join("out/scan.csv")).unwrap(), csv);
}

#[test]
fn falsify_fails_inside_the_mean_field_limit_cycle() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"
[model]
delta = -2.0
omega_lower = 5.0
omega_upper = 6.0
chi = -18.0

[lattice]
r_cut = 2.0

[falsify]
mf_starts = 2
drop_time = 10.0
t_end = 200.0
window = 50.0
"#;
    let out = qctc(d.path(), cfg, &["falsify", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(d.path());
    assert_eq!(s["mf_random_starts"], "FAIL");
    assert_eq!(s["verdict"], "FAIL");
    assert_eq!(s["manifest"]["seed"], 3);
}

#[test]
fn spectrum_of_a_stored_trace_finds_the_rabi_line() {
    let d = tempfile::tempdir().unwrap();
    // Uncoupled sites with ω = 0: damped Rabi flopping between ↓ and 0, whose
    // population oscillates at 2Ω up to O(γ²/Ω) corrections.
    let cfg = r#"
[model]
delta = 0.0
omega_lower = 10.0
omega_upper = 0.0
chi = 0.0

[run]
solver = "exact"
t_end = 20.0
window = 20.0

[lattice]
nx = 2
ny = 1

[spectrum]
input = "out/trace.csv"
channel = "n_0"
"#;
    let out = qctc(d.path(), cfg, &["trace"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = qctc(d.path(), cfg, &["spectrum"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let w = summary(d.path())["dominant_frequency"].as_f64().unwrap();
    assert!((w - 20.0).abs() < 0.5, "{w}");
    assert!(d.path().join("out/spectrum.csv").exists());
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            if let Err(e) = qctc::config::Config::from_toml(&text) {
                panic!("{}: {e}", path.display());
            }
            n += 1;
        }
    }
    assert!(n >= 5);
}
