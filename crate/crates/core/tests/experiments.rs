use std::collections::BTreeMap;

use schro_chaos::config::{EtaChoice, ExperimentConfig};
use schro_chaos::harness::{run_experiment, run_experiment_with_threads};
use schro_chaos::measures::SampleSource;
use schro_chaos::stats;

fn config(fixture: &str, n_list: Vec<usize>, replicates: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        n_list,
        replicates,
        seed,
        ..ExperimentConfig::for_fixture(fixture)
    }
}

/// At most one non-decrease, and that one within 5%.
fn decreasing_with_one_inversion(values: &[f64]) -> bool {
    let mut inversions = 0;
    for w in values.windows(2) {
        if w[1] >= w[0] {
            inversions += 1;
            if w[1] > 1.05 * w[0] {
                return false;
            }
        }
    }
    inversions <= 1
}

#[test]
fn error_shrinks_with_sample_size_on_asym23() {
    let mut c = config("asym23", vec![4, 8, 12, 16], 200, 7);
    c.source = Some(SampleSource::Product);
    let result = run_experiment("unbiased", &c).unwrap();
    let mut mean_abs = Vec::new();
    let mut median_abs = Vec::new();
    for block in &result.per_n {
        let dev = block.column("t_n_minus_theta").unwrap();
        mean_abs.push(stats::mean(&dev.iter().map(|v| v.abs()).collect::<Vec<_>>()));
        median_abs.push(block.summary.median_abs_error.unwrap());
    }
    assert!(decreasing_with_one_inversion(&mean_abs), "mean |T_N - theta|: {mean_abs:?}");
    assert!(decreasing_with_one_inversion(&median_abs), "median |T_N - theta|: {median_abs:?}");
    assert!(median_abs[3] < median_abs[0]);
}

#[test]
fn constant_payoff_has_no_deviation() {
    let mut c = config("asym23", vec![3, 9], 100, 1);
    c.eta = EtaChoice::CustomMatrix {
        matrix: vec![vec![2.5, 2.5], vec![2.5, 2.5]],
    };
    let result = run_experiment("unbiased", &c).unwrap();
    assert!((result.limit.theta - 2.5).abs() <= 1e-12);
    assert!(result.limit.sigma2.abs() <= 1e-20);
    for block in &result.per_n {
        for v in block.column("t_n_minus_theta").unwrap() {
            assert!(v.abs() <= 1e-10, "{v}");
        }
    }
}

#[test]
fn high_temperature_theta_is_the_product_average() {
    for fixture in ["sym2", "asym23"] {
        let mut c = config(fixture, vec![2], 100, 0);
        c.eps = 1e6;
        let result = run_experiment("unbiased", &c).unwrap();
        let problem = c.problem().unwrap();
        let (p, q) = (problem.rho0.weights(), problem.rho1.weights());
        let mut product = 0.0;
        for (i, pi) in p.iter().enumerate() {
            for (j, qj) in q.iter().enumerate() {
                product += problem.cost[(i, j)] * pi * qj;
            }
        }
        assert!((result.limit.theta - product).abs() <= 1e-6, "{fixture}: {} vs {product}", result.limit.theta);
    }
}

#[test]
fn bridge_samples_are_unbiased() {
    for fixture in ["sym2", "asym23"] {
        let result = run_experiment("unbiased", &config(fixture, vec![2, 5, 8], 2000, 3)).unwrap();
        assert_eq!(result.source, SampleSource::Bridge);
        for check in &result.checks {
            assert_eq!(check.passed, Some(true), "{fixture}: {check:?}");
        }
    }
}

fn written_files(name: &str, c: &ExperimentConfig, threads: usize) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    let result = run_experiment_with_threads(name, c, threads).unwrap();
    result
        .write(dir.path())
        .unwrap()
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let mut second = config("sym2", vec![4, 6], 150, 42);
    second.limit_draws = Some(400);
    for (name, c) in [
        ("second-order", second),
        ("unbiased", config("asym23", vec![3, 9], 120, 5)),
        ("compare-cuturi", config("asym23", vec![5], 100, 6)),
    ] {
        let serial = written_files(name, &c, 1);
        let parallel = written_files(name, &c, 3);
        assert_eq!(serial.len(), 2 * c.n_list.len());
        assert_eq!(serial, parallel, "{name}");
    }
}

#[test]
fn result_files_follow_naming_and_carry_limit_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let c = config("asym23", vec![4], 100, 11);
    let result = run_experiment("unbiased", &c).unwrap();
    let paths = result.write(dir.path()).unwrap();
    let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["unbiased_asym23_4_11.json", "unbiased_asym23_4_11.csv"]);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(&paths[0]).unwrap()).unwrap();
    for key in ["theta", "sigma2", "theta11p", "gamma", "s"] {
        assert!(summary["limit"].get(key).is_some(), "missing {key}");
    }
    let mut reader = csv::Reader::from_path(&paths[1]).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.iter().skip(1).all(|v| v.parse::<f64>().unwrap().is_finite())));
}
