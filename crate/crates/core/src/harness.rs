//! Seeded Monte Carlo experiments comparing exact finite-N statistics with
//! their limit laws.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::chaos::{
    first_chaos_value, first_order_kernels, gamma_coefficients, second_chaos_value, second_order_kernels,
    simulate_second_order_limit, FirstOrderKernels, SecondOrderKernels, ZERO_VARIANCE_TOL,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::estimator::{estimator, SampleInput, TnEstimator};
use crate::fixtures::Problem;
use crate::measures::{sample_bridge, sample_product, SampleBatch, SampleSource, SeededStream};
use crate::operators::{build_operators, BridgeOperators};
use crate::sinkhorn::{scale_to_uniform, solve_bridge, GibbsKernel};
use crate::stats;

pub const CLT_VARIANCE_REL_TOL: f64 = 0.15;
pub const CLT_KS_MAX: f64 = 0.05;
pub const SECOND_ORDER_KS_MAX: f64 = 0.08;
pub const SECOND_ORDER_MEAN_SE: f64 = 4.0;
pub const REMAINDER_SLOPE_MAX: f64 = -1.7;
pub const UNBIASED_SE: f64 = 3.0;
/// Absolute slack added to standard-error bands so exact zeros survive roundoff.
pub const ROUNDOFF_SLACK: f64 = 1e-12;
pub const REMAINDER_N_RANGE: (usize, usize) = (4, 14);
pub const CUTURI_MAX_N: usize = 14;
pub const THREADS_ENV: &str = "SCHRO_CHAOS_THREADS";

/// Everything an experiment needs, computed once per run.
pub struct Context {
    pub config: ExperimentConfig,
    pub problem: Problem,
    pub kernel: GibbsKernel,
    pub ops: BridgeOperators,
    pub eta: DMatrix<f64>,
    pub first: FirstOrderKernels,
    pub second: SecondOrderKernels,
    pub estimator: Box<dyn TnEstimator>,
}

impl Context {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let problem = config.problem()?;
        let eta = config.eta_matrix(&problem)?;
        let (kernel, _) = solve_bridge(
            &problem.rho0,
            &problem.rho1,
            &problem.cost,
            problem.eps,
            config.tol,
            config.max_iter,
        )?;
        let ops = build_operators(&kernel)?;
        let first = first_order_kernels(&eta, &kernel, &ops)?;
        let second = second_order_kernels(&eta, &kernel, &ops, &first)?;
        Ok(Self {
            config: config.clone(),
            problem,
            kernel,
            ops,
            eta,
            first,
            second,
            estimator: estimator(&config.method)?,
        })
    }

    fn source(&self, experiment: &dyn Experiment) -> SampleSource {
        self.config.source.unwrap_or_else(|| experiment.default_source())
    }

    /// Runs `body` on every replicate batch of size `n`, in replicate order.
    fn replicates<T: Send>(
        &self,
        n: usize,
        source: SampleSource,
        body: impl Fn(&SampleBatch) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        (0..self.config.replicates)
            .into_par_iter()
            .map(|r| {
                let mut stream = SeededStream::new(self.config.seed, ((n as u64) << 32) | r as u64);
                let batch = match source {
                    SampleSource::Product => sample_product(&self.problem.rho0, &self.problem.rho1, n, &mut stream),
                    SampleSource::Bridge => sample_bridge(&self.kernel, n, &mut stream),
                };
                body(&batch)
            })
            .collect()
    }

    /// `T_N - theta` computed from the centered payoff, plus the likelihood ratio.
    fn deviation(&self, batch: &SampleBatch) -> Result<(f64, f64)> {
        let centered = self.eta.add_scalar(-self.first.theta);
        let input = SampleInput::from_batch(batch, &centered, &self.problem.cost, &self.kernel);
        let est = self.estimator.estimate(&input)?;
        Ok((est.t_n, est.l_n.unwrap_or(f64::NAN)))
    }

    fn limit_parameters(&self) -> LimitParameters {
        let g = &self.second.gamma;
        LimitParameters {
            theta: self.first.theta,
            sigma2: self.first.sigma2,
            theta11p: self.second.theta11p,
            gamma: (0..g.nrows()).map(|r| g.row(r).iter().copied().collect()).collect(),
            s: self.ops.s.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LimitParameters {
    pub theta: f64,
    pub sigma2: f64,
    pub theta11p: f64,
    pub gamma: Vec<Vec<f64>>,
    pub s: Vec<f64>,
}

/// One named column of per-replicate values.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: &'static str,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Summary {
    /// Column the moments below describe.
    pub of: &'static str,
    pub mean: f64,
    pub variance: f64,
    pub standard_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_abs_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ks: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NResult {
    pub n: usize,
    #[serde(skip)]
    pub series: Vec<Series>,
    pub summary: Summary,
}

impl NResult {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.series.iter().find(|s| s.name == name).map(|s| s.values.as_slice())
    }
}

/// A pass/fail check; `passed` is `None` for report-only values.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Check {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub value: Option<f64>,
    pub threshold: f64,
    pub passed: Option<bool>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SlopeReport {
    pub slope: Option<f64>,
    pub defined: bool,
    pub log_n: Vec<f64>,
    pub log_variance: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub experiment: &'static str,
    pub fixture: String,
    pub seed: u64,
    pub method: String,
    pub source: SampleSource,
    pub replicates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit_draws: Option<usize>,
    pub limit: LimitParameters,
    pub per_n: Vec<NResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<SlopeReport>,
    pub checks: Vec<Check>,
}

impl ExperimentResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed != Some(false))
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.passed == Some(false)).collect()
    }

    pub fn at(&self, n: usize) -> Option<&NResult> {
        self.per_n.iter().find(|r| r.n == n)
    }

    fn file_stem(&self, n: usize) -> String {
        format!("{}_{}_{}_{}", self.experiment, self.fixture, n, self.seed)
    }

    /// JSON summary restricted to one sample size.
    pub fn summary_json(&self, n: usize) -> Result<String> {
        let mut view = self.clone();
        view.per_n.retain(|r| r.n == n);
        let mut text = serde_json::to_string_pretty(&view)?;
        text.push('\n');
        Ok(text)
    }

    /// Writes one JSON summary and one CSV of replicate arrays per sample size.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for block in &self.per_n {
            let stem = self.file_stem(block.n);
            let json_path = dir.join(format!("{stem}.json"));
            std::fs::write(&json_path, self.summary_json(block.n)?)?;
            written.push(json_path);

            let csv_path = dir.join(format!("{stem}.csv"));
            let mut w = csv::Writer::from_path(&csv_path)?;
            let mut header = vec!["replicate"];
            header.extend(block.series.iter().map(|s| s.name));
            w.write_record(&header)?;
            for r in 0..self.replicates {
                let mut row = vec![r.to_string()];
                row.extend(block.series.iter().map(|s| format!("{:?}", s.values[r])));
                w.write_record(&row)?;
            }
            w.flush()?;
            written.push(csv_path);
        }
        Ok(written)
    }
}

pub trait Experiment: Send + Sync {
    fn name(&self) -> &'static str;
    fn default_source(&self) -> SampleSource;
    fn run(&self, ctx: &Context) -> Result<ExperimentResult>;
}

fn summarize(of: &'static str, values: &[f64], t_n_minus_theta: Option<&[f64]>) -> Summary {
    Summary {
        of,
        mean: stats::mean(values),
        variance: stats::variance(values),
        standard_error: stats::standard_error(values),
        median_abs_error: t_n_minus_theta.map(|d| stats::median(&d.iter().map(|v| v.abs()).collect::<Vec<_>>())),
        ks: None,
    }
}

fn base_result(exp: &dyn Experiment, ctx: &Context, source: SampleSource) -> ExperimentResult {
    ExperimentResult {
        experiment: exp.name(),
        fixture: ctx.config.fixture_label(),
        seed: ctx.config.seed,
        method: ctx.estimator.name().to_string(),
        source,
        replicates: ctx.config.replicates,
        limit_draws: None,
        limit: ctx.limit_parameters(),
        per_n: Vec::new(),
        slope: None,
        checks: Vec::new(),
    }
}

fn check(name: &str, n: Option<usize>, value: f64, threshold: f64, passed: bool) -> Check {
    Check {
        name: name.to_string(),
        n,
        value: Some(value),
        threshold,
        passed: Some(passed),
    }
}

struct Clt;
struct SecondOrder;
struct Remainder;
struct Unbiased;
struct CompareCuturi;

impl Experiment for Clt {
    fn name(&self) -> &'static str {
        "clt"
    }

    fn default_source(&self) -> SampleSource {
        SampleSource::Product
    }

    fn run(&self, ctx: &Context) -> Result<ExperimentResult> {
        if ctx.first.sigma2 <= ZERO_VARIANCE_TOL {
            return Err(Error::DegenerateVariance);
        }
        let source = ctx.source(self);
        let mut out = base_result(self, ctx, source);
        let sigma2 = ctx.first.sigma2;
        for &n in &ctx.config.n_list {
            let rows = ctx.replicates(n, source, |batch| {
                let (dev, lr) = ctx.deviation(batch)?;
                let l1 = first_chaos_value(batch, &ctx.first);
                Ok([dev, lr, l1, (n as f64).sqrt() * dev, dev - l1])
            })?;
            let series = columns(&["t_n_minus_theta", "likelihood_ratio", "first_chaos", "scaled", "remainder"], &rows);
            let scaled = &series[3].values;
            let mut summary = summarize("scaled", scaled, Some(&series[0].values));
            let ks = stats::ks_distance(scaled, stats::normal_cdf(sigma2.sqrt()))?;
            summary.ks = Some(ks);
            let rel = (summary.variance / sigma2 - 1.0).abs();
            out.checks.push(check("clt-variance-relative-error", Some(n), rel, CLT_VARIANCE_REL_TOL, rel <= CLT_VARIANCE_REL_TOL));
            out.checks.push(check("clt-ks-normal", Some(n), ks, CLT_KS_MAX, ks <= CLT_KS_MAX));
            out.per_n.push(NResult { n, series, summary });
        }
        Ok(out)
    }
}

impl Experiment for SecondOrder {
    fn name(&self) -> &'static str {
        "second-order"
    }

    fn default_source(&self) -> SampleSource {
        SampleSource::Product
    }

    fn run(&self, ctx: &Context) -> Result<ExperimentResult> {
        let gamma = gamma_coefficients(&ctx.eta, &ctx.kernel, &ctx.ops)?;
        let source = ctx.source(self);
        let mut out = base_result(self, ctx, source);
        let draws = ctx.config.limit_draws();
        out.limit_draws = Some(draws);
        let reference = simulate_second_order_limit(&gamma, &ctx.ops.s, draws, ctx.config.seed);
        let theta11p = ctx.second.theta11p;
        for &n in &ctx.config.n_list {
            let rows = ctx.replicates(n, source, |batch| {
                let (dev, lr) = ctx.deviation(batch)?;
                let l1 = first_chaos_value(batch, &ctx.first);
                let l2 = second_chaos_value(batch, &ctx.second)?;
                let nf = n as f64;
                Ok([dev, lr, l1, l2, nf * dev + theta11p, nf * (dev - l1 - l2)])
            })?;
            let series = columns(
                &["t_n_minus_theta", "likelihood_ratio", "first_chaos", "second_chaos", "scaled", "remainder"],
                &rows,
            );
            let scaled = &series[4].values;
            let mut summary = summarize("scaled", scaled, Some(&series[0].values));
            let ks = stats::ks_two_sample(scaled, &reference)?;
            summary.ks = Some(ks);
            let band = SECOND_ORDER_MEAN_SE * summary.standard_error + ROUNDOFF_SLACK;
            out.checks.push(check("second-order-ks-limit", Some(n), ks, SECOND_ORDER_KS_MAX, ks <= SECOND_ORDER_KS_MAX));
            out.checks.push(check("second-order-mean-abs", Some(n), summary.mean.abs(), band, summary.mean.abs() <= band));
            out.per_n.push(NResult { n, series, summary });
        }
        Ok(out)
    }
}

impl Experiment for Remainder {
    fn name(&self) -> &'static str {
        "remainder"
    }

    fn default_source(&self) -> SampleSource {
        SampleSource::Bridge
    }

    fn run(&self, ctx: &Context) -> Result<ExperimentResult> {
        let (lo, hi) = REMAINDER_N_RANGE;
        if let Some(&n) = ctx.config.n_list.iter().find(|&&n| n < lo || n > hi) {
            return Err(Error::InvalidParameter(format!("remainder experiment needs N in [{lo}, {hi}], got {n}")));
        }
        let source = ctx.source(self);
        let mut out = base_result(self, ctx, source);
        for &n in &ctx.config.n_list {
            let rows = ctx.replicates(n, source, |batch| {
                let (dev, lr) = ctx.deviation(batch)?;
                let l1 = first_chaos_value(batch, &ctx.first);
                Ok([dev, lr, l1, dev - l1])
            })?;
            let series = columns(&["t_n_minus_theta", "likelihood_ratio", "first_chaos", "remainder"], &rows);
            let summary = summarize("remainder", &series[3].values, Some(&series[0].values));
            out.per_n.push(NResult { n, series, summary });
        }
        let log_n: Vec<f64> = out.per_n.iter().map(|r| (r.n as f64).ln()).collect();
        let variances: Vec<f64> = out.per_n.iter().map(|r| r.summary.variance).collect();
        let defined = log_n.len() >= 2 && variances.iter().all(|v| *v > ROUNDOFF_SLACK * ROUNDOFF_SLACK);
        let log_variance: Vec<f64> = if defined { variances.iter().map(|v| v.ln()).collect() } else { Vec::new() };
        let slope = defined.then(|| stats::ols_slope(&log_n, &log_variance));
        out.checks.push(Check {
            name: "remainder-log-log-slope".into(),
            n: None,
            value: slope,
            threshold: REMAINDER_SLOPE_MAX,
            passed: slope.map(|s| s <= REMAINDER_SLOPE_MAX),
        });
        out.slope = Some(SlopeReport {
            slope,
            defined,
            log_n,
            log_variance,
        });
        Ok(out)
    }
}

impl Experiment for Unbiased {
    fn name(&self) -> &'static str {
        "unbiased"
    }

    fn default_source(&self) -> SampleSource {
        SampleSource::Bridge
    }

    fn run(&self, ctx: &Context) -> Result<ExperimentResult> {
        let source = ctx.source(self);
        let mut out = base_result(self, ctx, source);
        let theta = ctx.first.theta;
        for &n in &ctx.config.n_list {
            let rows = ctx.replicates(n, source, |batch| {
                let (dev, lr) = ctx.deviation(batch)?;
                Ok([theta + dev, dev, lr])
            })?;
            let series = columns(&["t_n", "t_n_minus_theta", "likelihood_ratio"], &rows);
            let summary = summarize("t_n", &series[0].values, Some(&series[1].values));
            // The mean of the centered column avoids cancellation against theta.
            let gap = stats::mean(&series[1].values).abs();
            let band = UNBIASED_SE * summary.standard_error + ROUNDOFF_SLACK;
            out.checks.push(Check {
                name: "unbiased-mean-gap".into(),
                n: Some(n),
                value: Some(gap),
                threshold: band,
                passed: (source == SampleSource::Bridge).then_some(gap <= band),
            });
            out.per_n.push(NResult { n, series, summary });
        }
        Ok(out)
    }
}

impl Experiment for CompareCuturi {
    fn name(&self) -> &'static str {
        "compare-cuturi"
    }

    fn default_source(&self) -> SampleSource {
        SampleSource::Product
    }

    fn run(&self, ctx: &Context) -> Result<ExperimentResult> {
        if let Some(&n) = ctx.config.n_list.iter().find(|&&n| n > CUTURI_MAX_N) {
            return Err(Error::InvalidParameter(format!("compare-cuturi needs N <= {CUTURI_MAX_N}, got {n}")));
        }
        let source = ctx.source(self);
        let mut out = base_result(self, ctx, source);
        let eps = ctx.problem.eps;
        for &n in &ctx.config.n_list {
            let rows = ctx.replicates(n, source, |batch| {
                let input = SampleInput::from_batch(batch, &ctx.eta, &ctx.problem.cost, &ctx.kernel);
                let est = ctx.estimator.estimate(&input)?;
                let bridge = est.coupling.component_mul(&input.cost).sum();
                let cuturi = scale_to_uniform(&input.cost, eps, ctx.config.tol, ctx.config.max_iter)? / n as f64;
                let cuturi = cuturi.component_mul(&input.cost).sum();
                Ok([bridge, cuturi, bridge - cuturi])
            })?;
            let series = columns(&["bridge_transport_cost", "cuturi_transport_cost", "difference"], &rows);
            let summary = summarize("difference", &series[2].values, None);
            out.checks.push(Check {
                name: "cuturi-mean-difference".into(),
                n: Some(n),
                value: Some(summary.mean),
                threshold: 0.0,
                passed: None,
            });
            out.per_n.push(NResult { n, series, summary });
        }
        Ok(out)
    }
}

fn columns<const K: usize>(names: &[&'static str; K], rows: &[[f64; K]]) -> Vec<Series> {
    names
        .iter()
        .enumerate()
        .map(|(k, &name)| Series {
            name,
            values: rows.iter().map(|r| r[k]).collect(),
        })
        .collect()
}

pub fn registry() -> Vec<Box<dyn Experiment>> {
    vec![
        Box::new(Clt),
        Box::new(SecondOrder),
        Box::new(Remainder),
        Box::new(Unbiased),
        Box::new(CompareCuturi),
    ]
}

pub fn experiment_names() -> Vec<&'static str> {
    registry().iter().map(|e| e.name()).collect()
}

pub fn experiment(name: &str) -> Result<Box<dyn Experiment>> {
    registry()
        .into_iter()
        .find(|e| e.name() == name)
        .ok_or_else(|| Error::Unknown {
            kind: "experiment",
            name: name.to_string(),
        })
}

/// Worker count from `SCHRO_CHAOS_THREADS`, else the hardware parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|t| t.get()).unwrap_or(1))
}

pub fn run_experiment_with_threads(name: &str, config: &ExperimentConfig, threads: usize) -> Result<ExperimentResult> {
    let exp = experiment(name)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| {
        let ctx = Context::new(config)?;
        exp.run(&ctx)
    })
}

pub fn run_experiment(name: &str, config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with_threads(name, config, thread_count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(fixture: &str, n_list: Vec<usize>, replicates: usize) -> ExperimentConfig {
        ExperimentConfig {
            n_list,
            replicates,
            seed: 3,
            ..ExperimentConfig::for_fixture(fixture)
        }
    }

    #[test]
    fn lookup() {
        assert_eq!(
            experiment_names(),
            vec!["clt", "second-order", "remainder", "unbiased", "compare-cuturi"]
        );
        assert!(experiment("bootstrap").is_err());
    }

    #[test]
    fn clt_refuses_degenerate() {
        let r = run_experiment_with_threads("clt", &config("sym2", vec![4], 100), 1);
        assert!(matches!(r, Err(Error::DegenerateVariance)));
    }

    #[test]
    fn second_order_refuses_nondegenerate() {
        let r = run_experiment_with_threads("second-order", &config("asym23", vec![4], 100), 1);
        assert!(matches!(r, Err(Error::NotDegenerateFirstOrder(_))));
    }

    #[test]
    fn unbiased_single_draw() {
        let r = run_experiment_with_threads("unbiased", &config("asym23", vec![1], 100), 1).unwrap();
        let t = r.at(1).unwrap().column("t_n").unwrap();
        // T_1 = eta(X_1, Y_1) exactly, which is a squared distance on {0, 1}.
        assert!(t.iter().all(|v| v.abs() < 1e-12 || (v - 1.0).abs() < 1e-12));
        assert!(r.passed());
    }

    #[test]
    fn remainder_range_enforced() {
        let r = run_experiment_with_threads("remainder", &config("asym23", vec![2, 4], 100), 1);
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn cuturi_single_point() {
        let r = run_experiment_with_threads("compare-cuturi", &config("asym23", vec![1], 100), 1).unwrap();
        let d = r.at(1).unwrap().column("difference").unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-12));
    }
}
