//! End-to-end analysis and its JSON report.

use std::collections::BTreeMap;

use covadj::estimators::{Diagnostics, EstimateResult};
use covadj::variance::{bootstrap_variances, sandwich_variance, VarianceMethod, VarianceReport};
use covadj::{Analysis, CovariateSelector, Dataset, PModelDesign};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::ingest::ingest_csv;

pub const SCHEMA_VERSION: &str = "1.0.0";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: &'static str,
    pub data: DataSummary,
    pub settings: Settings,
    /// Keyed by estimator name.
    pub estimators: BTreeMap<String, EstimatorReport>,
    /// Estimators × (point, variance).
    pub table: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub n: usize,
    pub n_observed_outcomes: usize,
    pub n_treated: usize,
    pub outcome_missing_rate: f64,
    pub covariates: Vec<String>,
    pub partial_covariates: Vec<CovariateMissingness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateMissingness {
    pub name: String,
    pub missing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub pmodel: PModelDesign,
    pub emodel: CovariateSelector,
    pub variance: Vec<VarianceMethod>,
    pub bootstrap_reps: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorReport {
    pub estimate: Option<f64>,
    /// Keyed by variance method.
    pub se: BTreeMap<String, Option<f64>>,
    pub ci95: BTreeMap<String, Option<[f64; 2]>>,
    pub diagnostics: EstimatorDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorDiagnostics {
    pub status: Status,
    pub n: usize,
    pub n_observed_outcomes: usize,
    pub fit: Option<Diagnostics>,
    pub bootstrap_replicates: Option<usize>,
    pub bootstrap_failed_replicates: Option<usize>,
    /// Field path (e.g. `se.bootstrap`) to the code explaining each null.
    pub null_reasons: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub estimator: String,
    pub point: Option<f64>,
    pub variance: Option<f64>,
    pub variance_method: Option<VarianceMethod>,
}

impl Report {
    pub fn failed_count(&self) -> usize {
        self.estimators
            .values()
            .filter(|e| e.diagnostics.status == Status::Failed)
            .count()
    }

    pub fn all_ok(&self) -> bool {
        self.estimators
            .values()
            .all(|e| e.diagnostics.status == Status::Ok)
    }

    /// Exit code for a written report: 0 when everything succeeded, 3 when
    /// every estimator failed, 4 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_ok() {
            0
        } else if self.failed_count() == self.estimators.len() {
            3
        } else {
            4
        }
    }

    pub fn to_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Plain-text table of point estimates and variances.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>14} {:>14}  {}\n",
            "estimator", "point", "variance", "method"
        );
        let num = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        for row in &self.table {
            out.push_str(&format!(
                "{:<10} {:>14} {:>14}  {}\n",
                row.estimator,
                num(row.point),
                num(row.variance),
                row.variance_method.map_or("-", |m| m.name())
            ));
        }
        out
    }
}

pub fn run_analysis(config: &RunConfig) -> CliResult<Report> {
    let data = ingest_csv(config)?;
    analyze_dataset(&data, config)
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn analyze_dataset(data: &Dataset, config: &RunConfig) -> CliResult<Report> {
    config.validate()?;
    let cfg = config.estimator_config();
    let n = data.n();
    let n_obs = data.n_observed();

    let analysis = Analysis::new(data, &cfg);
    let fits: Vec<Result<EstimateResult, covadj::Error>> = config
        .methods
        .iter()
        .map(|&m| match &analysis {
            Ok(a) => a.estimate(m),
            Err(e) => Err(e.clone()),
        })
        .collect();

    let wants_boot = config.variance.contains(&VarianceMethod::Bootstrap);
    let boot: Vec<Result<VarianceReport, covadj::Error>> = if wants_boot {
        match bootstrap_variances(
            data,
            &cfg,
            &config.methods,
            config.bootstrap_reps,
            config.seed,
        ) {
            Ok(v) => v,
            Err(e) => config.methods.iter().map(|_| Err(e.clone())).collect(),
        }
    } else {
        Vec::new()
    };

    let mut estimators = BTreeMap::new();
    let mut table = Vec::new();
    for (mi, &method) in config.methods.iter().enumerate() {
        let mut reasons = BTreeMap::new();
        let mut se = BTreeMap::new();
        let mut ci = BTreeMap::new();
        let fit = fits[mi].as_ref();
        let estimate = match fit {
            Ok(f) => finite(f.tau_hat).or_else(|| {
                reasons.insert("estimate".into(), "non_finite".into());
                None
            }),
            Err(e) => {
                reasons.insert("estimate".into(), e.code().into());
                None
            }
        };
        let mut boot_counts = (None, None);
        let mut variances: Vec<(VarianceMethod, f64)> = Vec::new();
        for &vm in &config.variance {
            let key = vm.name().to_string();
            let report: Result<VarianceReport, covadj::Error> = match vm {
                VarianceMethod::Sandwich => match fit {
                    Ok(f) => sandwich_variance(data, f),
                    Err(e) => Err(e.clone()),
                },
                VarianceMethod::Bootstrap => boot[mi].clone(),
            };
            match report {
                Ok(r) if r.se.is_finite() && r.ci95.iter().all(|v| v.is_finite()) => {
                    if vm == VarianceMethod::Bootstrap {
                        boot_counts = (r.replicates, r.failed_replicates);
                    }
                    variances.push((vm, r.tau_variance));
                    se.insert(key.clone(), Some(r.se));
                    ci.insert(key, Some(r.ci95));
                }
                Ok(_) => {
                    reasons.insert(format!("se.{key}"), "non_finite".into());
                    reasons.insert(format!("ci95.{key}"), "non_finite".into());
                    se.insert(key.clone(), None);
                    ci.insert(key, None);
                }
                Err(e) => {
                    reasons.insert(format!("se.{key}"), e.code().into());
                    reasons.insert(format!("ci95.{key}"), e.code().into());
                    se.insert(key.clone(), None);
                    ci.insert(key, None);
                }
            }
        }
        let status = if estimate.is_none() {
            Status::Failed
        } else if reasons.is_empty() {
            Status::Ok
        } else {
            Status::Partial
        };
        let fit_diag = fit.ok().map(|f| f.diagnostics.clone());
        match &fit_diag {
            None => {
                reasons.insert("diagnostics.fit".into(), "estimate_failed".into());
            }
            Some(d) => {
                if d.p_iterations.is_none() {
                    reasons.insert(
                        "diagnostics.fit.p_converged".into(),
                        "p_fixed_at_one".into(),
                    );
                    reasons.insert(
                        "diagnostics.fit.p_iterations".into(),
                        "p_fixed_at_one".into(),
                    );
                }
                if d.e_iterations.is_none() {
                    reasons.insert(
                        "diagnostics.fit.e_converged".into(),
                        "not_applicable".into(),
                    );
                    reasons.insert(
                        "diagnostics.fit.e_iterations".into(),
                        "not_applicable".into(),
                    );
                }
            }
        }
        if boot_counts.0.is_none() {
            let why = if wants_boot {
                "bootstrap_failed"
            } else {
                "not_requested"
            };
            reasons.insert("diagnostics.bootstrap_replicates".into(), why.into());
            reasons.insert("diagnostics.bootstrap_failed_replicates".into(), why.into());
        }
        let (variance_method, variance) = variances
            .first()
            .map_or((None, None), |&(m, v)| (Some(m), Some(v)));
        table.push(TableRow {
            estimator: method.name().to_string(),
            point: estimate,
            variance,
            variance_method,
        });
        estimators.insert(
            method.name().to_string(),
            EstimatorReport {
                estimate,
                se,
                ci95: ci,
                diagnostics: EstimatorDiagnostics {
                    status,
                    n,
                    n_observed_outcomes: n_obs,
                    fit: fit_diag,
                    bootstrap_replicates: boot_counts.0,
                    bootstrap_failed_replicates: boot_counts.1,
                    null_reasons: reasons,
                },
            },
        );
    }

    let pc = &data.covariates;
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        data: DataSummary {
            n,
            n_observed_outcomes: n_obs,
            n_treated: data.treatment.iter().filter(|z| **z).count(),
            outcome_missing_rate: 1.0 - n_obs as f64 / n as f64,
            covariates: pc.fully_observed_labels().to_vec(),
            partial_covariates: pc
                .partial_labels()
                .iter()
                .enumerate()
                .map(|(k, name)| CovariateMissingness {
                    name: name.clone(),
                    missing_rate: (0..n).filter(|&i| !pc.is_observed(i, k)).count() as f64
                        / n as f64,
                })
                .collect(),
        },
        settings: Settings {
            pmodel: config.pmodel,
            emodel: config.emodel,
            variance: config.variance.clone(),
            bootstrap_reps: wants_boot.then_some(config.bootstrap_reps),
            seed: config.seed,
        },
        estimators,
        table,
    })
}
