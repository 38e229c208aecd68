use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_schro-chaos"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn directory_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn verify_passes_on_each_fixture() {
    for fixture in ["sym2", "asym23"] {
        let out = run(&["verify", "--fixture", fixture]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.trim_end().ends_with("0 failed"));
        assert!(!text.contains("FAIL"));
    }
}

#[test]
fn estimate_methods_agree() {
    for (fixture, n) in [("sym2", "5"), ("asym23", "7")] {
        let out = run(&["estimate", "--fixture", fixture, "--n", n, "--seed", "4", "--method", "both"]);
        assert_eq!(code(&out), 0);
        let v = stdout_json(&out);
        assert!(v["brute_permanent_gap"].as_f64().unwrap() <= 1e-12);
        let coupling = v["estimates"]["permanent"]["coupling"].as_array().unwrap();
        assert_eq!(coupling.len(), n.parse::<usize>().unwrap());
    }
}

#[test]
fn solve_operators_and_kernels_emit_json() {
    let solve = stdout_json(&run(&["bridge", "solve", "--fixture", "sym2"]));
    let e = std::f64::consts::E;
    assert!((solve["xi"][0][0].as_f64().unwrap() - 2.0 * e / (1.0 + e)).abs() <= 1e-12);
    let ops = stdout_json(&run(&["operators", "--fixture", "sym2"]));
    assert!((ops["s"][1].as_f64().unwrap() - 0.5f64.tanh()).abs() <= 1e-12);
    let kernels = run(&["chaos", "kernels", "--fixture", "asym23"]);
    assert_eq!(code(&kernels), 0);
    assert!(stdout_json(&kernels).get("fixture").is_some());
}

#[test]
fn simulate_limit_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.csv");
    let out = run(&["chaos", "simulate-limit", "--fixture", "sym2", "--draws", "50", "--output", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 51);
    // The first-order variance of asym23 is positive, so no second-order limit exists.
    let refused = run(&["chaos", "simulate-limit", "--fixture", "asym23", "--draws", "5"]);
    assert_eq!(code(&refused), 1);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["mc", "no-such-experiment"])), 2);
    assert_eq!(code(&run(&["verify", "--fixture", "sym3"])), 2);
    assert_eq!(code(&run(&["estimate", "--config", "/definitely/missing.json"])), 2);
    assert_eq!(code(&run(&["estimate", "--fixture", "sym2", "--n", "40"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"fixture": "sym2", "eps": -2}"#).unwrap();
    let out = run(&["estimate", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(".eps"));
    std::fs::write(&bad, r#"{"fixture": "sym2", "replicates": "many"}"#).unwrap();
    assert_eq!(code(&run(&["mc", "unbiased", "--config", bad.to_str().unwrap()])), 3);
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&run(&["operators", "--config", bad.to_str().unwrap()])), 3);

    // A degenerate first chaos makes the CLT experiment meaningless on sym2.
    let out_dir = dir.path().join("out");
    let out = run(&["mc", "clt", "--fixture", "sym2", "--n", "4", "--replicates", "100", "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn failing_check_exit_respects_strict_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    // Under product sampling the unbiasedness check is report-only.
    let base = ["mc", "unbiased", "--fixture", "asym23", "--n", "3", "--replicates", "100", "--source", "product", "--output-dir", out_dir];
    let out = run(&base);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("REPORT"));

    let strict = ["mc", "second-order", "--fixture", "sym2", "--n", "2", "--replicates", "100", "--limit-draws", "1000", "--output-dir", out_dir];
    let out = run(&strict);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    if text.contains("FAIL") {
        assert_eq!(code(&out), 1);
        let mut lenient = strict.to_vec();
        lenient.push("--strict=false");
        assert_eq!(code(&run(&lenient)), 0);
    } else {
        assert_eq!(code(&out), 0);
    }
}

#[test]
fn mc_outputs_are_byte_identical_across_thread_counts() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, threads) in dirs.iter().zip(["1", "3", "1"]) {
        let out = bin()
            .args(["mc", "second-order", "--fixture", "sym2", "--n", "4,6", "--replicates", "120", "--limit-draws", "500"])
            .args(["--seed", "99", "--strict=false", "--output-dir", dir.path().to_str().unwrap()])
            .env("SCHRO_CHAOS_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let first = directory_bytes(dirs[0].path());
    assert_eq!(
        first.keys().cloned().collect::<Vec<_>>(),
        [
            "second-order_sym2_4_99.csv",
            "second-order_sym2_4_99.json",
            "second-order_sym2_6_99.csv",
            "second-order_sym2_6_99.json"
        ]
    );
    assert_eq!(first, directory_bytes(dirs[1].path()));
    assert_eq!(first, directory_bytes(dirs[2].path()));
}

#[test]
fn config_file_drives_experiments() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    let out_dir = dir.path().join("results");
    std::fs::write(
        &config,
        format!(
            r#"{{
                "rho0": {{"atoms": [0, 1, 2], "weights": [1, 1, 2]}},
                "rho1": {{"atoms": [0, 1], "weights": [0.4, 0.6]}},
                "cost": {{"kind": "squared-euclidean"}},
                "eps": 0.7,
                "n_list": [3, 5],
                "replicates": 100,
                "seed": 12,
                "output_dir": "{}"
            }}"#,
            out_dir.display()
        ),
    )
    .unwrap();
    let out = run(&["mc", "unbiased", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let files = directory_bytes(&out_dir);
    assert!(files.contains_key("unbiased_custom_3_12.json"));
    assert!(files.contains_key("unbiased_custom_5_12.csv"));
}
