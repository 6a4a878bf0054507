//! Simulation-study harness: grids of generator settings, replications,
//! the four estimators, and long/aggregated CSV output.
//!
//! Replication `r` of every grid point uses seed `seed ^ r` for sampling
//! and splitting. Truth is redrawn per replication from that same seed,
//! except for the coverage study, where it is drawn once from `seed` so
//! that `F*` is a single target.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GhiveError, Result};
use crate::estimator::{fit_naive_mle, CoefMatrix, FitControl};
use crate::inference::{confidence_interval, naive_wald_interval, Contrast};
use crate::io::{atomic_write, csv_err};
use crate::pipeline::{crossfit_stage, CrossFitStage, FitMode};
use crate::rng::rep_seed;
use crate::simgen::{fstar_oracle, make_truth, metrics, sample_dataset, SimConfig, SimTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Approximation bias of `F*` and `P_B^perp F*` against `p`.
    Fig1Bias,
    /// Estimation error against confounding strength `eta`.
    Fig1Eta,
    /// Estimation error against sample size.
    Fig2N,
    /// Estimation error against response dimension.
    Fig2M,
    /// Interval coverage for `(P_B^perp F*)_11`.
    Table1Coverage,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Fig1Bias,
        ExperimentKind::Fig1Eta,
        ExperimentKind::Fig2N,
        ExperimentKind::Fig2M,
        ExperimentKind::Table1Coverage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Fig1Bias => "fig1-bias",
            ExperimentKind::Fig1Eta => "fig1-eta",
            ExperimentKind::Fig2N => "fig2-n",
            ExperimentKind::Fig2M => "fig2-m",
            ExperimentKind::Table1Coverage => "table1",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn fixed_truth(self) -> bool {
        self == ExperimentKind::Table1Coverage
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    DataDriven,
    OracleK,
    OracleP,
    NaiveMle,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::DataDriven,
        Estimator::OracleK,
        Estimator::OracleP,
        Estimator::NaiveMle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::DataDriven => "data_driven",
            Estimator::OracleK => "oracle_k",
            Estimator::OracleP => "oracle_p",
            Estimator::NaiveMle => "naive_mle",
        }
    }
}

/// Label used for the rows of the bias study, which fits no estimator.
pub const FSTAR_LABEL: &str = "fstar";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub grid: Vec<SimConfig>,
    pub estimators: Vec<Estimator>,
    pub reps: usize,
    pub seed: u64,
    /// Monte Carlo size for `F*`.
    pub n_mc: usize,
    pub alpha: f64,
    pub control: FitControl,
}

fn grid_of(values: impl IntoIterator<Item = SimConfig>) -> Vec<SimConfig> {
    values.into_iter().collect()
}

impl ExperimentSpec {
    /// Settings of the simulation study. Desk scale cuts replications;
    /// `full_scale` restores the original counts and grids.
    pub fn preset(kind: ExperimentKind, full_scale: bool, seed: u64) -> Self {
        let all = Estimator::ALL.to_vec();
        let (grid, estimators, reps, n_mc) = match kind {
            ExperimentKind::Fig1Bias => {
                let ps: Vec<usize> = if full_scale {
                    (3..=15).collect()
                } else {
                    vec![3, 6, 9, 12, 15]
                };
                let grid = grid_of(ps.into_iter().map(|p| SimConfig::new(100, p, 3, 10.0)));
                (
                    grid,
                    vec![],
                    if full_scale { 20 } else { 5 },
                    if full_scale { 200_000 } else { 50_000 },
                )
            }
            ExperimentKind::Fig1Eta => {
                let grid = grid_of((1..=8).map(|e| SimConfig::new(100, 4, 4, e as f64)));
                (grid, all, if full_scale { 500 } else { 100 }, 50_000)
            }
            ExperimentKind::Fig2N => {
                let ns: Vec<usize> = if full_scale {
                    (100..=400).step_by(50).collect()
                } else {
                    vec![100, 200, 300, 400]
                };
                let grid = grid_of(ns.into_iter().map(|n| SimConfig::new(n, 4, 4, 4.0)));
                (grid, all, if full_scale { 200 } else { 50 }, 50_000)
            }
            ExperimentKind::Fig2M => {
                let grid = grid_of([4, 8, 12, 16, 20].map(|m| SimConfig::new(200, 4, m, 4.0)));
                (grid, all, if full_scale { 100 } else { 50 }, 50_000)
            }
            ExperimentKind::Table1Coverage => {
                let grid = grid_of([40, 70].map(|n| SimConfig::new(n, 4, 4, 4.0)));
                (
                    grid,
                    vec![Estimator::DataDriven, Estimator::NaiveMle],
                    100,
                    if full_scale { 200_000 } else { 100_000 },
                )
            }
        };
        ExperimentSpec {
            kind,
            grid,
            estimators,
            reps,
            seed,
            n_mc,
            alpha: 0.05,
            control: FitControl::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(GhiveError::InvalidInput("experiment grid is empty".into()));
        }
        if self.reps == 0 {
            return Err(GhiveError::InvalidInput("reps must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(GhiveError::InvalidInput(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        let needs_fstar = matches!(self.kind, ExperimentKind::Fig1Bias | ExperimentKind::Table1Coverage);
        if needs_fstar && self.n_mc < 10_000 {
            return Err(GhiveError::InvalidInput(format!(
                "n_mc must be at least 10000, got {}",
                self.n_mc
            )));
        }
        for c in &self.grid {
            c.validate()?;
        }
        Ok(())
    }
}

/// One observation in the long-format output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub experiment: String,
    pub grid: usize,
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub k: usize,
    pub eta: f64,
    pub estimator: String,
    pub rep: usize,
    pub metric: String,
    pub value: f64,
    pub failed: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggRow {
    pub experiment: String,
    pub grid: usize,
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub k: usize,
    pub eta: f64,
    pub estimator: String,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    /// Standard error of the mean; 0 when `count < 2`.
    pub se: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub rows: Vec<LongRow>,
}

struct RowSink<'a> {
    kind: ExperimentKind,
    grid: usize,
    config: &'a SimConfig,
    rep: usize,
    rows: Vec<LongRow>,
}

impl RowSink<'_> {
    fn push(&mut self, estimator: &str, metric: &str, value: f64) {
        self.rows.push(self.row(estimator, metric, value, false, String::new()));
    }

    fn fail(&mut self, estimator: &str, err: &dyn std::fmt::Display) {
        self.rows
            .push(self.row(estimator, "failure", f64::NAN, true, err.to_string()));
    }

    fn row(&self, estimator: &str, metric: &str, value: f64, failed: bool, message: String) -> LongRow {
        LongRow {
            experiment: self.kind.name().to_string(),
            grid: self.grid,
            n: self.config.n,
            p: self.config.p,
            m: self.config.m_dim,
            k: self.config.k,
            eta: self.config.eta,
            estimator: estimator.to_string(),
            rep: self.rep,
            metric: metric.to_string(),
            value,
            failed,
            message,
        }
    }
}

fn bool_value(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn converged_fraction(c: &CoefMatrix) -> f64 {
    c.converged.iter().filter(|b| **b).count() as f64 / c.converged.len() as f64
}

struct Fixed {
    truth: SimTruth,
    f_star: CoefMatrix,
    target: f64,
}

fn run_rep(spec: &ExperimentSpec, g: usize, rep: usize, fixed: Option<&Fixed>) -> Vec<LongRow> {
    let base = &spec.grid[g];
    let rs = rep_seed(spec.seed, rep as u64);
    let mut config = base.clone();
    config.seed = if spec.kind.fixed_truth() { spec.seed } else { rs };
    let mut sink = RowSink {
        kind: spec.kind,
        grid: g,
        config: base,
        rep,
        rows: Vec::new(),
    };

    let owned_truth;
    let truth = match fixed {
        Some(f) => &f.truth,
        None => match make_truth(&config) {
            Ok(t) => {
                owned_truth = t;
                &owned_truth
            }
            Err(e) => {
                let labels: Vec<&str> = if spec.estimators.is_empty() {
                    vec![FSTAR_LABEL]
                } else {
                    spec.estimators.iter().map(|e| e.name()).collect()
                };
                for l in labels {
                    sink.fail(l, &e);
                }
                return sink.rows;
            }
        },
    };

    if spec.kind == ExperimentKind::Fig1Bias {
        match fstar_oracle(truth, &config, spec.n_mc, spec.control).and_then(|f| {
            let m = metrics(&truth.theta, truth, Some(&f.values), None)?;
            Ok((f, m))
        }) {
            Ok((f, m)) => {
                sink.push(FSTAR_LABEL, "bias1", m.bias1.unwrap_or(f64::NAN));
                sink.push(FSTAR_LABEL, "bias2", m.bias2.unwrap_or(f64::NAN));
                sink.push(FSTAR_LABEL, "converged", converged_fraction(&f));
            }
            Err(e) => sink.fail(FSTAR_LABEL, &e),
        }
        return sink.rows;
    }

    let data = match sample_dataset(truth, &config, rs) {
        Ok(d) => d,
        Err(e) => {
            for est in &spec.estimators {
                sink.fail(est.name(), &e);
            }
            return sink.rows;
        }
    };

    let needs_stage = spec.estimators.iter().any(|e| *e != Estimator::NaiveMle);
    let stage: Option<std::result::Result<CrossFitStage, GhiveError>> =
        needs_stage.then(|| crossfit_stage(&data, config.family, rs, spec.control));

    for &est in &spec.estimators {
        let name = est.name();
        if let (Some(Err(e)), true) = (&stage, est != Estimator::NaiveMle) {
            sink.fail(name, e);
            continue;
        }
        let outcome: Result<()> = (|| {
            if est == Estimator::NaiveMle {
                let naive = fit_naive_mle(&data, config.family, spec.control)?;
                let mt = metrics(&naive.values, truth, None, None)?;
                sink.push(name, "frob_err", mt.frob_err);
                sink.push(name, "frob_err_unsquared", mt.frob_err_unsquared);
                sink.push(name, "converged", converged_fraction(&naive));
                if let Some(fx) = fixed {
                    let v = DVector::from_fn(config.p, |j, _| bool_value(j == 0));
                    let (est_v, lo, hi) = naive_wald_interval(&data, config.family, &naive, 0, &v, spec.alpha)?;
                    let q = crate::inference::normal_quantile(1.0 - spec.alpha / 2.0);
                    sink.push(name, "estimate", est_v);
                    sink.push(name, "se", if q > 0.0 { (hi - lo) / (2.0 * q) } else { 0.0 });
                    sink.push(name, "ci_length", hi - lo);
                    sink.push(name, "covered", bool_value(lo <= fx.target && fx.target <= hi));
                    let th = truth.theta[(0, 0)];
                    sink.push(name, "covered_theta", bool_value(lo <= th && th <= hi));
                }
                return Ok(());
            }
            let Some(Ok(stage)) = &stage else {
                unreachable!("cross-fitting runs before any projected estimator")
            };
            let mode = match est {
                Estimator::DataDriven => FitMode::DataDriven,
                Estimator::OracleK => FitMode::OracleK(config.k),
                Estimator::OracleP => FitMode::OracleP(truth.p_b_perp.clone()),
                Estimator::NaiveMle => unreachable!(),
            };
            let fit = stage.finish(&mode)?;
            let mt = metrics(&fit.theta_hat, truth, None, Some(&fit.spectral.p_perp))?;
            sink.push(name, "frob_err", mt.frob_err);
            sink.push(name, "frob_err_unsquared", mt.frob_err_unsquared);
            sink.push(name, "proj_err", mt.proj_err.unwrap_or(f64::NAN));
            sink.push(name, "k_hat", fit.k_hat() as f64);
            sink.push(name, "converged", converged_fraction(&fit.f_hat));
            if let Some(fx) = fixed {
                let c = Contrast::unit(config.m_dim, 0, config.p, 0)?;
                let ci = confidence_interval(&fit, &data, &c, spec.alpha)?;
                sink.push(name, "estimate", ci.estimate);
                sink.push(name, "se", ci.se);
                sink.push(name, "ci_length", ci.ci_hi - ci.ci_lo);
                sink.push(
                    name,
                    "covered",
                    bool_value(ci.ci_lo <= fx.target && fx.target <= ci.ci_hi),
                );
                let half = ci.quantile * ci.se_sum_over_n;
                sink.push(name, "se_sum_over_n", ci.se_sum_over_n);
                sink.push(
                    name,
                    "covered_sum_over_n",
                    bool_value((ci.estimate - fx.target).abs() <= half),
                );
                let th = truth.theta[(0, 0)];
                sink.push(name, "covered_theta", bool_value(ci.ci_lo <= th && th <= ci.ci_hi));
                sink.push(
                    name,
                    "g_regularized",
                    bool_value(ci.g_condition.iter().any(|g| g.regularized)),
                );
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            sink.rows.retain(|r| r.estimator != name);
            sink.fail(name, &e);
        }
    }
    sink.rows
}

/// Runs every grid point and replication in parallel; rows come back in
/// (grid, rep, estimator, metric) order regardless of scheduling.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let fixed: Vec<Option<Fixed>> = if spec.kind.fixed_truth() {
        spec.grid
            .iter()
            .map(|base| {
                let mut config = base.clone();
                config.seed = spec.seed;
                let truth = make_truth(&config)?;
                let f_star = fstar_oracle(&truth, &config, spec.n_mc, spec.control)?;
                let target = (&truth.p_b_perp * &f_star.values)[(0, 0)];
                Ok(Some(Fixed { truth, f_star, target }))
            })
            .collect::<Result<_>>()?
    } else {
        spec.grid.iter().map(|_| None).collect()
    };
    for f in fixed.iter().flatten() {
        if f.f_star.converged.iter().any(|c| !c) {
            log::warn!("F* oracle did not converge for every response");
        }
    }
    let jobs: Vec<(usize, usize)> = (0..spec.grid.len())
        .flat_map(|g| (0..spec.reps).map(move |r| (g, r)))
        .collect();
    let rows: Vec<LongRow> = jobs
        .par_iter()
        .map(|&(g, r)| run_rep(spec, g, r, fixed[g].as_ref()))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(ExperimentResult {
        spec: spec.clone(),
        rows,
    })
}

/// Means and standard errors over non-failed rows, keyed by
/// (grid, estimator, metric) in first-appearance order.
pub fn aggregate(rows: &[LongRow]) -> Vec<AggRow> {
    let mut order: Vec<(usize, String, String)> = Vec::new();
    let mut groups: HashMap<(usize, String, String), (Vec<f64>, &LongRow)> = HashMap::new();
    let mut failures: HashMap<(usize, String), usize> = HashMap::new();
    for r in rows {
        if r.failed {
            *failures.entry((r.grid, r.estimator.clone())).or_default() += 1;
            continue;
        }
        let key = (r.grid, r.estimator.clone(), r.metric.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                (Vec::new(), r)
            })
            .0
            .push(r.value);
    }
    let mut out: Vec<AggRow> = order
        .into_iter()
        .map(|key| {
            let (vals, first) = &groups[&key];
            let count = vals.len();
            let mean = vals.iter().sum::<f64>() / count as f64;
            let se = if count > 1 {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
                (var / count as f64).sqrt()
            } else {
                0.0
            };
            AggRow {
                experiment: first.experiment.clone(),
                grid: key.0,
                n: first.n,
                p: first.p,
                m: first.m,
                k: first.k,
                eta: first.eta,
                estimator: key.1.clone(),
                metric: key.2,
                count,
                mean,
                se,
                failures: failures.get(&(key.0, key.1)).copied().unwrap_or(0),
            }
        })
        .collect();
    // Estimators that failed in every replication still get a row.
    for r in rows.iter().filter(|r| r.failed) {
        if !out.iter().any(|a| a.grid == r.grid && a.estimator == r.estimator) {
            out.push(AggRow {
                experiment: r.experiment.clone(),
                grid: r.grid,
                n: r.n,
                p: r.p,
                m: r.m,
                k: r.k,
                eta: r.eta,
                estimator: r.estimator.clone(),
                metric: "failure".into(),
                count: 0,
                mean: f64::NAN,
                se: f64::NAN,
                failures: failures[&(r.grid, r.estimator.clone())],
            });
        }
    }
    out
}

impl ExperimentResult {
    pub fn aggregate(&self) -> Vec<AggRow> {
        aggregate(&self.rows)
    }

    /// Aggregated mean for one grid point, estimator and metric.
    pub fn mean(&self, grid: usize, estimator: &str, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| !r.failed && r.grid == grid && r.estimator == estimator && r.metric == metric)
            .map(|r| r.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.failed).count()
    }

    /// Writes `<name>_long.csv` and `<name>_summary.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| GhiveError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let name = self.spec.kind.name();
        let long = dir.join(format!("{name}_long.csv"));
        let summary = dir.join(format!("{name}_summary.csv"));
        atomic_write(&long, &to_csv(&self.rows)?)?;
        atomic_write(&summary, &to_csv(&self.aggregate())?)?;
        Ok((long, summary))
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| GhiveError::InvalidInput(e.to_string()))
}

pub fn long_rows_from_csv(bytes: &[u8]) -> Result<Vec<LongRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<Vec<LongRow>, _>>()
        .map_err(csv_err)
}

pub fn agg_rows_from_csv(bytes: &[u8]) -> Result<Vec<AggRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<Vec<AggRow>, _>>()
        .map_err(csv_err)
}
