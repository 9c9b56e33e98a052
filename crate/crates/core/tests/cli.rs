//! End-to-end checks on the command line binary: outputs, determinism and exit codes.

use netsmpc::config::BENCHMARK_TOML;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_netsmpc");

/// Benchmark config with cheap moment estimates.
fn quick_config(dir: &Path, edit: impl Fn(String) -> String) -> std::path::PathBuf {
    let text = BENCHMARK_TOML
        .replace("channel_samples = 100000", "channel_samples = 4000")
        .replace("noise_samples = 100000", "noise_samples = 4000")
        .replace("h_max = 20", "h_max = 8");
    let path = dir.join("exp.toml");
    std::fs::write(&path, edit(text)).unwrap();
    path
}

fn run(args: &[&str], cache: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .env("NETSMPC_CACHE_DIR", cache)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn validate_reports_the_split() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["validate"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("d_o = 3, stable part d_s = 1"), "{text}");
    assert!(text.contains("κ = 3"), "{text}");
    assert!(text.contains("all checks passed"));
}

#[test]
fn simulate_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = quick_config(tmp.path(), |s| s);
    let cache = tmp.path().join("cache");
    let cfg_s = cfg.to_str().unwrap();
    let mut outputs = Vec::new();
    for run_dir in ["a", "b"] {
        let dir = tmp.path().join(run_dir);
        let dump = tmp.path().join(format!("{run_dir}.json"));
        let out = run(
            &[
                "simulate",
                cfg_s,
                "--paths",
                "3",
                "--steps",
                "12",
                "--out",
                dir.to_str().unwrap(),
                "--dump-qp",
                dump.to_str().unwrap(),
            ],
            &cache,
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(dir);
    }
    for name in ["trace.csv", "ensemble.csv"] {
        let a = std::fs::read(outputs[0].join(name)).unwrap();
        let b = std::fs::read(outputs[1].join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    // 3 paths × 12 steps plus a header
    let trace = std::fs::read_to_string(outputs[0].join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 37);
    assert!(trace.starts_with("path,t,"));
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a.json")).unwrap()).unwrap();
    let n = dump["n"].as_u64().unwrap() as usize;
    assert_eq!(dump["hessian"].as_array().unwrap().len(), n);
    assert_eq!(dump["linear"].as_array().unwrap().len(), n);
    assert_eq!(
        dump["ineq_matrix"].as_array().unwrap().len(),
        dump["ineq_rhs"].as_array().unwrap().len()
    );
    assert!(
        std::fs::read_dir(&cache).unwrap().count() > 0,
        "moment cache not written"
    );
    let manifest = std::fs::read_to_string(outputs[0].join("manifest.json")).unwrap();
    assert!(manifest.contains("config_hash"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = TempDir::new().unwrap();
    let cfg = quick_config(tmp.path(), |s| s.replace("steps = 120", "steps = 9"));
    let out = run(
        &[
            "sweep",
            cfg.to_str().unwrap(),
            "--vary",
            "downlink",
            "--values",
            "0.6,1.0",
            "--paths",
            "2",
            "--out",
            tmp.path().to_str().unwrap(),
        ],
        &tmp.path().join("cache"),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("msb_sweep.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("channel,prob,msb"));
    assert!(lines[1].starts_with("downlink,0.6,"));
}

#[test]
fn governor_writes_reference() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("gov.csv");
    let out = run(
        &["governor", "--steps", "30", "--out", path.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), 31);
}

#[test]
fn bad_inputs_map_to_distinct_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let cache = tmp.path().join("cache");
    let check = |edit: &dyn Fn(String) -> String, cmd: &str, expected: i32| {
        let cfg = quick_config(tmp.path(), edit);
        let out = run(&[cmd, cfg.to_str().unwrap()], &cache);
        assert_eq!(
            code(&out),
            expected,
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    // reference share above one
    check(&|s| s.replace("delta = 0.5", "delta = 1.2"), "validate", 2);
    // recalculation interval different from the reachability index
    check(&|s| s.replace("n_r = 3", "n_r = 2"), "validate", 2);
    // unstable mode violates the spectral assumption
    check(
        &|s| s.replace("[0.9, 0.0, 0.0, 0.0]", "[1.5, 0.0, 0.0, 0.0]"),
        "validate",
        3,
    );
    check(&|s| s.replace("[horizon]", "[horizon"), "validate", 2);

    let missing = run(
        &["validate", tmp.path().join("nope.toml").to_str().unwrap()],
        &cache,
    );
    assert_eq!(code(&missing), 5);

    let cfg = quick_config(tmp.path(), |s| s);
    let out = run(
        &[
            "sweep",
            cfg.to_str().unwrap(),
            "--vary",
            "uplink",
            "--values",
            "0.5,1.3",
            "--paths",
            "1",
            "--out",
            tmp.path().to_str().unwrap(),
        ],
        &cache,
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn moments_table_prints() {
    let tmp = TempDir::new().unwrap();
    let cfg = quick_config(tmp.path(), |s| s);
    let out = run(
        &["moments", cfg.to_str().unwrap(), "--samples", "3000"],
        &tmp.path().join("c"),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out.stdout.is_empty());
}
