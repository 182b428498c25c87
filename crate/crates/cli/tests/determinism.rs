//! End-to-end runs of the built binary: determinism across worker counts,
//! the zero-drift baseline, and the parse-time exponent gates.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

fn run(args: &[&str], workers: &str, out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_zvonkin"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("ZVONKIN_WORKERS", workers)
        .output()
        .expect("spawning the CLI")
}

fn csv_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).expect("run directory") {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "csv") {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, std::fs::read(&path).unwrap());
        }
    }
    out
}

/// Criterion 10: two full runs with identical seed and config produce
/// byte-identical CSVs, independent of the worker count.
#[test]
fn criterion_10_determinism() {
    let config = scenario("lacunary.toml");
    let tmp = std::env::temp_dir().join("zvonkin-determinism");
    let (a, b) = (tmp.join("a"), tmp.join("b"));
    for d in [&a, &b] {
        let _ = std::fs::remove_dir_all(d);
    }

    let ra = run(&["full", "--config", config.to_str().unwrap()], "1", &a);
    assert!(ra.status.success(), "{}", String::from_utf8_lossy(&ra.stderr));
    let rb = run(&["full", "--config", config.to_str().unwrap()], "4", &b);
    assert!(rb.status.success(), "{}", String::from_utf8_lossy(&rb.stderr));

    let ca = csv_bytes(&a);
    let cb = csv_bytes(&b);
    assert!(!ca.is_empty(), "no CSVs produced");
    assert_eq!(
        ca.keys().collect::<Vec<_>>(),
        cb.keys().collect::<Vec<_>>(),
        "file sets differ"
    );
    let mut identical = true;
    for (name, bytes) in &ca {
        if cb[name] != *bytes {
            identical = false;
            println!("  {name}: differs between worker counts");
        }
    }
    println!(
        "ACCEPTANCE 10 determinism: {}",
        if identical { "PASS" } else { "FAIL" }
    );
    assert!(identical, "CSV outputs depend on the worker count");
}

/// Zero drift: every check passes and the tuner accepts the first rung.
#[test]
fn brownian_baseline_passes_at_lambda0() {
    let config = scenario("brownian_baseline.toml");
    let out = std::env::temp_dir().join("zvonkin-baseline");
    let _ = std::fs::remove_dir_all(&out);
    let r = run(&["full", "--config", config.to_str().unwrap()], "1", &out);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    let lambda = manifest
        .lines()
        .find_map(|l| l.strip_prefix("lambda = "))
        .expect("lambda entry")
        .trim()
        .parse::<f64>()
        .unwrap();
    assert_eq!(lambda, 4.0, "zero drift must keep lambda at lambda0");

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.ends_with(",pass")), "{summary}");
}

/// The endpoint q = 2 is rejected at parse time.
#[test]
fn critical_exponent_is_rejected() {
    let config = scenario("brownian_baseline.toml");
    let out = std::env::temp_dir().join("zvonkin-gate");
    let r = Command::new(env!("CARGO_BIN_EXE_zvonkin"))
        .args([
            "norms",
            "--config",
            config.to_str().unwrap(),
            "--set",
            "exponents.q=2.0",
        ])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("open critical case"), "{err}");
}

/// Transport demands the narrower exponent window.
#[test]
fn transport_window_gate() {
    let config = scenario("perp_lacunary.toml");
    let out = std::env::temp_dir().join("zvonkin-gate2");
    let r = Command::new(env!("CARGO_BIN_EXE_zvonkin"))
        .args([
            "norms",
            "--config",
            config.to_str().unwrap(),
            "--set",
            "exponents.q=1.55",
            "--set",
            "exponents.theta=0.05",
        ])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("4/(2+alpha)"), "{err}");
}
