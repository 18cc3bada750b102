use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bsdeflow(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsdeflow"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn bsdeflow")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_SOLVE: &str =
    "seed = 3\n[problem]\nbuiltin = \"tp1\"\n[numerics]\nn_paths = 2000\n[[points]]\nx = [0.5, 0.0]\n";

#[test]
fn parse_error_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "seed = 3\n[problem]\nbuiltin = \"tp1\"\n[numerics]\nn_paths = = 4\n");
    let o = bsdeflow(&["solve"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));
}

#[test]
fn invalid_value_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "seed = 3\n[problem]\nbuiltin = \"tp1\"\n[numerics]\nh = -0.1\n");
    let o = bsdeflow(&["solve"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("line 5") && e.contains("numerics.h"), "{e}");
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[problem]\nbuiltin = \"tp1\"\n");
    let o = bsdeflow(&["hypotheses"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
    // a command-line seed is enough
    let o = bsdeflow(&["hypotheses", "--seed", "4"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn experiment_mismatch_is_a_config_error() {
    let o =
        bsdeflow(&["solve"], &configs().join("hypotheses_beta0.toml"), &tempfile::tempdir().unwrap().path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("experiment"));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "seed = 3\n[problem]\nbuiltin = \"tp1\"\n[numerics]\nnpaths = 4\n");
    assert_eq!(bsdeflow(&["solve"], &cfg, &dir.path().join("out")).status.code(), Some(2));
}

#[test]
fn failing_constants_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = bsdeflow(&["hypotheses"], &configs().join("hypotheses_beta0.toml"), dir.path());
    assert_eq!(o.status.code(), Some(3));
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("FAIL"), "{summary}");
    // other experiments refuse to run at all
    let cfg = write(dir.path(), "s.toml", &SMALL_SOLVE.replace("n_paths = 2000", "n_paths = 2000\nbeta = 0.0"));
    let o = bsdeflow(&["solve"], &cfg, &dir.path().join("s"));
    assert_eq!(o.status.code(), Some(3));
    assert!(!dir.path().join("s/report.json").exists());
}

#[test]
fn wrong_user_derivative_is_caught_and_force_proceeds() {
    let dir = tempfile::tempdir().unwrap();
    let problem = std::fs::read_to_string(configs().join("problems/euler.toml"))
        .unwrap()
        .replace("psi_dxx = [[\"-5.0\"]]", "psi_dxx = [[\"-4.0\"]]");
    write(dir.path(), "p.toml", &problem);
    let cfg = write(
        dir.path(),
        "c.toml",
        "seed = 3\n[problem]\nfile = \"p.toml\"\n[numerics]\nn_paths = 500\n[[points]]\nx = [1.5]\n",
    );
    let o = bsdeflow(&["solve"], &cfg, &dir.path().join("a"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = bsdeflow(&["solve", "--force"], &cfg, &dir.path().join("b"));
    assert_ne!(o.status.code(), Some(3));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("b/report.json")).unwrap()).unwrap();
    assert_eq!(report["forced"], true);
    assert!(!report["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn solve_writes_reports_with_embedded_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL_SOLVE);
    let out = dir.path().join("out");
    let o = bsdeflow(&["solve"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["report.json", "summary.txt", "meta.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["experiment"], "solve");
    assert_eq!(r["config"]["seed"], 3);
    assert_eq!(r["config"]["numerics"]["n_paths"], 2000);
    assert_eq!(r["config"]["numerics"]["lambda"], 0.45);
    assert_eq!(r["problem"]["builtin"], "tp1");
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SMALL_SOLVE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    bsdeflow(&["solve", "--seed", "77"], &cfg, &a);
    bsdeflow(&["solve"], &cfg, &b);
    let ra = std::fs::read_to_string(a.join("report.json")).unwrap();
    let rb = std::fs::read_to_string(b.join("report.json")).unwrap();
    let r: serde_json::Value = serde_json::from_str(&ra).unwrap();
    assert_eq!(r["config"]["seed"], 77);
    assert_ne!(ra, rb);
}

#[test]
fn bounds_csv_has_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = bsdeflow(&["verify-bounds"], &configs().join("bounds_tp2.toml"), &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("bounds.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(csv.as_bytes());
    let header: Vec<String> = rows.headers().unwrap().iter().map(str::to_string).collect();
    for col in ["order", "x", "xi0", "psi", "measured", "stderr", "shape", "ratio", "calibration"] {
        assert!(header.iter().any(|h| h == col), "missing {col} in {header:?}");
    }
    assert!(rows.records().count() > 0);
}
