//! Data-generating processes and a replication engine.
//!
//! Two built-in designs: a sinusoidal one with a single uniform covariate and
//! logistic outcome missingness, and a latent-class one with nine partially
//! observed covariates whose missingness depends on the latent class.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{Analysis, EstimatorConfig, Method, PModelDesign};
use crate::glm::sigmoid;
use crate::linalg::Matrix;
use crate::missing::{CovariateSelector, PartialCovariates};
use crate::rng::{substream, StreamRole};
use crate::variance::{sandwich_variance, Z_95};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinusoidalParams {
    /// `x ~ Uniform(−half_width, half_width)`.
    pub half_width: f64,
    pub p_intercept: f64,
    pub p_slope: f64,
    /// Observe every outcome (`p ≡ 1`).
    pub full_data: bool,
}

impl Default for SinusoidalParams {
    fn default() -> Self {
        Self {
            half_width: 10.0,
            p_intercept: 1.0,
            p_slope: 2.0,
            full_data: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentClassParams {
    pub class_prob: f64,
    pub k: usize,
    /// Probability that a partial covariate is observed, by class.
    pub observe_prob_ill: f64,
    pub observe_prob_well: f64,
    /// `(γ_{1|1}, γ_{0|1})` for ξ = 1 and `(γ_{1|0}, γ_{0|0})` for ξ = 0.
    pub gamma_ill: (f64, f64),
    pub gamma_well: (f64, f64),
    pub class_effect: f64,
    pub indicator_effect: f64,
    pub p_intercept: f64,
    pub p_slope: f64,
}

impl Default for LatentClassParams {
    fn default() -> Self {
        Self {
            class_prob: 0.4,
            k: 9,
            observe_prob_ill: 0.5,
            observe_prob_well: 0.95,
            gamma_ill: (1.0, -1.0),
            gamma_well: (0.5, -0.5),
            class_effect: 3.0,
            indicator_effect: 3.0,
            p_intercept: 1.0,
            p_slope: 2.0,
        }
    }
}

/// A sample together with the unobservable quantities behind it.
#[derive(Debug, Clone)]
pub struct SampledData {
    pub dataset: Dataset,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    /// True outcome-observation probability of each unit.
    pub p: Vec<f64>,
    pub true_tau: f64,
}

/// Draws from the superpopulation with the treatment left unassigned, as
/// needed by the asymptotic-variance oracle. `u1`/`u0` are rows of the
/// outcome-missingness design at `Z = 1` and `Z = 0`.
#[derive(Debug, Clone)]
pub struct PopulationDraws {
    pub e: f64,
    pub full_data: bool,
    pub x: Matrix,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub p1: Vec<f64>,
    pub p0: Vec<f64>,
    pub u1: Matrix,
    pub u0: Matrix,
}

impl PopulationDraws {
    pub fn len(&self) -> usize {
        self.y1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y1.is_empty()
    }

    pub fn concat(parts: &[PopulationDraws]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("no draws".into()))?;
        let stack = |f: &dyn Fn(&PopulationDraws) -> &Matrix| -> Result<Matrix> {
            let cols = f(first).cols();
            let rows: usize = parts.iter().map(|p| f(p).rows()).sum();
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|p| f(p).data().iter().copied())
                .collect();
            Matrix::new(rows, cols, data)
        };
        let cat = |f: &dyn Fn(&PopulationDraws) -> &Vec<f64>| -> Vec<f64> {
            parts.iter().flat_map(|p| f(p).iter().copied()).collect()
        };
        Ok(Self {
            e: first.e,
            full_data: first.full_data,
            x: stack(&|p| &p.x)?,
            y1: cat(&|p| &p.y1),
            y0: cat(&|p| &p.y0),
            p1: cat(&|p| &p.p1),
            p0: cat(&|p| &p.p0),
            u1: stack(&|p| &p.u1)?,
            u0: stack(&|p| &p.u0)?,
        })
    }
}

/// User-supplied design.
pub trait CustomDgp: Send + Sync {
    fn name(&self) -> &str;
    fn true_tau(&self) -> f64;
    /// One replication; draw from `substream(seed, role, rep)`.
    fn sample(&self, n: usize, e: f64, seed: u64, rep: u64) -> Result<SampledData>;
    fn population_draws(
        &self,
        _n: usize,
        _e: f64,
        _rng: &mut ChaCha8Rng,
    ) -> Result<PopulationDraws> {
        Err(Error::InvalidInput(format!(
            "{} does not expose population draws",
            self.name()
        )))
    }
}

#[derive(Clone)]
pub enum DgpKind {
    Sinusoidal(SinusoidalParams),
    LatentClass(LatentClassParams),
    Custom(Arc<dyn CustomDgp>),
}

impl fmt::Debug for DgpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DgpKind::Sinusoidal(p) => f.debug_tuple("Sinusoidal").field(p).finish(),
            DgpKind::LatentClass(p) => f.debug_tuple("LatentClass").field(p).finish(),
            DgpKind::Custom(c) => f.debug_tuple("Custom").field(&c.name()).finish(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub e: f64,
}

pub const PRESET_NAMES: [&str; 2] = ["sinusoidal", "latent-class"];

impl DgpSpec {
    pub fn new(kind: DgpKind, n: usize, e: f64) -> Result<Self> {
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::InvalidInput(format!(
                "treatment probability {e} not in (0, 1)"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidInput("sample size must be at least 2".into()));
        }
        Ok(Self { kind, n, e })
    }

    /// Built-in design by name with default parameters.
    pub fn preset(name: &str, n: usize, e: f64) -> Result<Self> {
        let kind = match name {
            "sinusoidal" => DgpKind::Sinusoidal(SinusoidalParams::default()),
            "latent-class" => DgpKind::LatentClass(LatentClassParams::default()),
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown DGP `{other}`; presets: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Self::new(kind, n, e)
    }

    pub fn name(&self) -> String {
        match &self.kind {
            DgpKind::Sinusoidal(p) if p.full_data => "sinusoidal-full-data".into(),
            DgpKind::Sinusoidal(_) => "sinusoidal".into(),
            DgpKind::LatentClass(_) => "latent-class".into(),
            DgpKind::Custom(c) => c.name().to_string(),
        }
    }

    pub fn true_tau(&self) -> f64 {
        match &self.kind {
            DgpKind::Sinusoidal(p) => p.half_width.sin() / p.half_width,
            DgpKind::LatentClass(p) => {
                // Within class ξ, E[x + Σw] = (1 + K) ξ, so only ξ = 1 contributes.
                p.class_prob * (1 + p.k) as f64 * (p.gamma_ill.0 - p.gamma_ill.1)
            }
            DgpKind::Custom(c) => c.true_tau(),
        }
    }

    pub fn sample(&self, seed: u64, rep: u64) -> Result<SampledData> {
        match &self.kind {
            DgpKind::Sinusoidal(p) => sample_sinusoidal_with(p, self.n, self.e, seed, rep),
            DgpKind::LatentClass(p) => sample_latent_class_with(p, self.n, self.e, seed, rep),
            DgpKind::Custom(c) => c.sample(self.n, self.e, seed, rep),
        }
    }

    pub fn population_draws(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<PopulationDraws> {
        match &self.kind {
            DgpKind::Sinusoidal(p) => {
                let x: Vec<f64> = (0..n)
                    .map(|_| rng.random_range(-p.half_width..p.half_width))
                    .collect();
                let prob: Vec<f64> = x
                    .iter()
                    .map(|x| {
                        if p.full_data {
                            1.0
                        } else {
                            sigmoid(p.p_intercept + p.p_slope * x)
                        }
                    })
                    .collect();
                let u = design_1x(&x)?;
                Ok(PopulationDraws {
                    e: self.e,
                    full_data: p.full_data,
                    y1: x.iter().map(|x| x.sin()).collect(),
                    y0: x.iter().map(|x| -x.cos()).collect(),
                    x: Matrix::column_vector(&x)?,
                    p1: prob.clone(),
                    p0: prob,
                    u1: u.clone(),
                    u0: u,
                })
            }
            DgpKind::LatentClass(p) => {
                let mut xs = Vec::with_capacity(n);
                let mut y1 = Vec::with_capacity(n);
                let mut y0 = Vec::with_capacity(n);
                for _ in 0..n {
                    let noise = (normal(rng), normal(rng));
                    let unit = latent_unit(p, rng, noise);
                    xs.push(unit.x);
                    y1.push(unit.y1);
                    y0.push(unit.y0);
                }
                let prob: Vec<f64> = xs
                    .iter()
                    .map(|x| sigmoid(p.p_intercept + p.p_slope * x))
                    .collect();
                let u = design_1x(&xs)?;
                Ok(PopulationDraws {
                    e: self.e,
                    full_data: false,
                    x: Matrix::column_vector(&xs)?,
                    y1,
                    y0,
                    p1: prob.clone(),
                    p0: prob,
                    u1: u.clone(),
                    u0: u,
                })
            }
            DgpKind::Custom(c) => c.population_draws(n, self.e, rng),
        }
    }
}

fn design_1x(x: &[f64]) -> Result<Matrix> {
    Matrix::from_columns(x.len(), &[vec![1.0; x.len()], x.to_vec()])
}

pub fn sample_sinusoidal(n: usize, e: f64, seed: u64) -> Result<SampledData> {
    DgpSpec::new(DgpKind::Sinusoidal(SinusoidalParams::default()), n, e)?.sample(seed, 0)
}

pub fn sample_latent_class(n: usize, e: f64, seed: u64) -> Result<SampledData> {
    DgpSpec::new(DgpKind::LatentClass(LatentClassParams::default()), n, e)?.sample(seed, 0)
}

fn assign(n: usize, e: f64, seed: u64, rep: u64) -> Vec<bool> {
    let mut rng = substream(seed, StreamRole::Assignment, rep);
    (0..n).map(|_| rng.random::<f64>() < e).collect()
}

fn sample_sinusoidal_with(
    p: &SinusoidalParams,
    n: usize,
    e: f64,
    seed: u64,
    rep: u64,
) -> Result<SampledData> {
    let mut cov = substream(seed, StreamRole::Covariates, rep);
    let x: Vec<f64> = (0..n)
        .map(|_| cov.random_range(-p.half_width..p.half_width))
        .collect();
    let z = assign(n, e, seed, rep);
    let mut mask = substream(seed, StreamRole::OutcomeMask, rep);
    let y1: Vec<f64> = x.iter().map(|x| x.sin()).collect();
    let y0: Vec<f64> = x.iter().map(|x| -x.cos()).collect();
    let prob: Vec<f64> = x
        .iter()
        .map(|x| {
            if p.full_data {
                1.0
            } else {
                sigmoid(p.p_intercept + p.p_slope * x)
            }
        })
        .collect();
    let outcome = (0..n)
        .map(|i| {
            let observed = mask.random::<f64>() < prob[i];
            observed.then_some(if z[i] { y1[i] } else { y0[i] })
        })
        .collect();
    let pc = PartialCovariates::fully_observed_only(Matrix::column_vector(&x)?, vec!["x".into()])?;
    Ok(SampledData {
        dataset: Dataset::new(pc, z, outcome)?,
        y1,
        y0,
        p: prob,
        true_tau: p.half_width.sin() / p.half_width,
    })
}

struct LatentUnit {
    x: f64,
    w: Vec<f64>,
    observed: Vec<bool>,
    y1: f64,
    y0: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One unit's covariates and potential outcomes; `noise` holds the standard
/// normal errors of `(Y(1), Y(0))`.
fn latent_unit(p: &LatentClassParams, rng: &mut ChaCha8Rng, noise: (f64, f64)) -> LatentUnit {
    let ill = rng.random::<f64>() < p.class_prob;
    let xi = if ill { 1.0 } else { 0.0 };
    let x = xi + normal(rng);
    let w: Vec<f64> = (0..p.k).map(|_| xi + normal(rng)).collect();
    let obs_prob = if ill {
        p.observe_prob_ill
    } else {
        p.observe_prob_well
    };
    let observed: Vec<bool> = (0..p.k).map(|_| rng.random::<f64>() < obs_prob).collect();
    let (g1, g0) = if ill { p.gamma_ill } else { p.gamma_well };
    let s = x + w.iter().sum::<f64>();
    let base =
        p.class_effect * xi + p.indicator_effect * observed.iter().filter(|o| **o).count() as f64;
    LatentUnit {
        x,
        w,
        observed,
        y1: base + s * g1 + noise.0,
        y0: base + s * g0 + noise.1,
    }
}

fn sample_latent_class_with(
    p: &LatentClassParams,
    n: usize,
    e: f64,
    seed: u64,
    rep: u64,
) -> Result<SampledData> {
    let mut cov = substream(seed, StreamRole::Covariates, rep);
    let mut noise = substream(seed, StreamRole::OutcomeNoise, rep);
    let z = assign(n, e, seed, rep);
    let mut mask = substream(seed, StreamRole::OutcomeMask, rep);
    let mut x = Vec::with_capacity(n);
    let mut w_rows = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut prob = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    for i in 0..n {
        let unit = latent_unit(p, &mut cov, (normal(&mut noise), normal(&mut noise)));
        let pi = sigmoid(p.p_intercept + p.p_slope * unit.x);
        let observed = mask.random::<f64>() < pi;
        outcome.push(observed.then_some(if z[i] { unit.y1 } else { unit.y0 }));
        w_rows.push(
            unit.w
                .iter()
                .zip(&unit.observed)
                .map(|(v, o)| o.then_some(*v))
                .collect::<Vec<_>>(),
        );
        x.push(unit.x);
        y1.push(unit.y1);
        y0.push(unit.y0);
        prob.push(pi);
    }
    let pc = PartialCovariates::new(
        Matrix::column_vector(&x)?,
        vec!["x".into()],
        w_rows,
        (1..=p.k).map(|k| format!("w{k}")).collect(),
    )?;
    Ok(SampledData {
        dataset: Dataset::new(pc, z, outcome)?,
        y1,
        y0,
        p: prob,
        true_tau: p.class_prob * (1 + p.k) as f64 * (p.gamma_ill.0 - p.gamma_ill.1),
    })
}

/// A labelled estimator configuration for the replication engine.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSpec {
    pub label: String,
    pub config: EstimatorConfig,
}

impl EstimatorSpec {
    pub fn new(label: &str, config: EstimatorConfig) -> Self {
        Self {
            label: label.to_string(),
            config,
        }
    }
}

/// Outcome-missingness model used by the simulation presets: intercept plus
/// the fully observed covariate, matching how both designs generate `p`.
pub fn simulation_pmodel() -> PModelDesign {
    PModelDesign::covariates_only(CovariateSelector::FullyObservedOnly)
}

fn sim_config(method: Method, emodel: CovariateSelector) -> EstimatorConfig {
    EstimatorConfig {
        method,
        pmodel: simulation_pmodel(),
        emodel,
        ..Default::default()
    }
}

/// unadj, x-reg, x-ps (and dr) adjusting for `x` on the sinusoidal design.
pub fn sinusoidal_estimators() -> Vec<EstimatorSpec> {
    let sel = CovariateSelector::FullyObservedOnly;
    vec![
        EstimatorSpec::new("unadj", sim_config(Method::Unadj, sel)),
        EstimatorSpec::new("x-reg", sim_config(Method::XReg, sel)),
        EstimatorSpec::new("x-ps", sim_config(Method::XPs, sel)),
        EstimatorSpec::new("dr", sim_config(Method::Dr, sel)),
    ]
}

/// unadj and x-ps with nested covariate sets on the latent-class design.
pub fn latent_class_estimators() -> Vec<EstimatorSpec> {
    vec![
        EstimatorSpec::new("unadj", sim_config(Method::Unadj, CovariateSelector::Empty)),
        EstimatorSpec::new(
            "x-ps(x)",
            sim_config(Method::XPs, CovariateSelector::FullyObservedOnly),
        ),
        EstimatorSpec::new(
            "x-ps(x^imp)",
            sim_config(Method::XPs, CovariateSelector::ImputedOnly),
        ),
        EstimatorSpec::new(
            "x-ps(x^mim)",
            sim_config(Method::XPs, CovariateSelector::FullMim),
        ),
    ]
}

pub fn default_estimators(dgp: &DgpSpec) -> Vec<EstimatorSpec> {
    match dgp.kind {
        DgpKind::LatentClass(_) => latent_class_estimators(),
        _ => sinusoidal_estimators(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McOptions {
    pub reps: usize,
    pub seed: u64,
    pub sandwich: bool,
    /// Bootstrap replicates per replication, if any.
    pub bootstrap: Option<usize>,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl McOptions {
    pub fn new(reps: usize, seed: u64) -> Self {
        Self {
            reps,
            seed,
            sandwich: true,
            bootstrap: None,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub estimator: String,
    pub tau_hat: Option<f64>,
    pub se_sandwich: Option<f64>,
    pub var_bootstrap: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub label: String,
    pub method: Method,
    pub successes: usize,
    pub failures: usize,
    pub mean_estimate: f64,
    pub mean_bias: f64,
    /// Standard error of `mean_bias` (empirical SD / √reps).
    pub bias_se: Option<f64>,
    /// Sample variance of the estimates; absent with fewer than 2 successes.
    pub empirical_variance: Option<f64>,
    /// Monte Carlo standard error of `empirical_variance`.
    pub empirical_variance_se: Option<f64>,
    pub mean_sandwich_variance: Option<f64>,
    pub mean_bootstrap_variance: Option<f64>,
    /// Share of sandwich Wald intervals covering the true effect.
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub dgp: String,
    pub n: usize,
    pub e: f64,
    pub reps: usize,
    pub seed: u64,
    pub true_tau: f64,
    pub estimators: Vec<EstimatorSummary>,
}

impl McSummary {
    pub fn get(&self, label: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.label == label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub summary: McSummary,
    pub records: Vec<ReplicationRecord>,
}

/// Neumaier-compensated sum.
fn stable_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn stable_mean(v: &[f64]) -> f64 {
    stable_sum(v.iter().copied()) / v.len() as f64
}

/// Sample variance and the standard error of that variance estimate,
/// `√((m₄ − s⁴ (n−3)/(n−1)) / n)`.
pub fn variance_with_se(v: &[f64]) -> Option<(f64, f64)> {
    let n = v.len();
    if n < 2 {
        return None;
    }
    let mean = stable_mean(v);
    let s2 = stable_sum(v.iter().map(|x| (x - mean).powi(2))) / (n - 1) as f64;
    if n < 4 {
        return Some((s2, f64::NAN));
    }
    let m4 = stable_sum(v.iter().map(|x| (x - mean).powi(4))) / n as f64;
    let nf = n as f64;
    let var_of_s2 = (m4 - s2 * s2 * (nf - 3.0) / (nf - 1.0)) / nf;
    Some((s2, var_of_s2.max(0.0).sqrt()))
}

fn run_replication(
    dgp: &DgpSpec,
    specs: &[EstimatorSpec],
    opts: &McOptions,
    rep: usize,
) -> Vec<ReplicationRecord> {
    let fail = |label: &str, err: &Error| ReplicationRecord {
        rep,
        estimator: label.to_string(),
        tau_hat: None,
        se_sandwich: None,
        var_bootstrap: None,
        error: Some(err.code().to_string()),
    };
    let sample = match dgp.sample(opts.seed, rep as u64) {
        Ok(s) => s,
        Err(e) => return specs.iter().map(|s| fail(&s.label, &e)).collect(),
    };
    let data = &sample.dataset;
    // Specs that differ only in method share one analysis (and one p̂).
    let mut analyses: Vec<(EstimatorConfig, Result<Analysis>)> = Vec::new();
    specs
        .iter()
        .map(|spec| {
            let key = spec.config.with_method(Method::Unadj);
            let idx = match analyses.iter().position(|(k, _)| *k == key) {
                Some(i) => i,
                None => {
                    analyses.push((key.clone(), Analysis::new(data, &key)));
                    analyses.len() - 1
                }
            };
            let analysis = match &analyses[idx].1 {
                Ok(a) => a,
                Err(e) => return fail(&spec.label, e),
            };
            let fit = match analysis.estimate(spec.config.method) {
                Ok(f) => f,
                Err(e) => return fail(&spec.label, &e),
            };
            let se_sandwich = if opts.sandwich {
                sandwich_variance(data, &fit).ok().map(|v| v.se)
            } else {
                None
            };
            let var_bootstrap = opts.bootstrap.and_then(|b| {
                crate::variance::bootstrap_variance(
                    data,
                    &spec.config,
                    b,
                    opts.seed ^ (rep as u64).rotate_left(32),
                )
                .ok()
                .map(|v| v.tau_variance)
            });
            ReplicationRecord {
                rep,
                estimator: spec.label.clone(),
                tau_hat: Some(fit.tau_hat),
                se_sandwich,
                var_bootstrap,
                error: None,
            }
        })
        .collect()
}

/// Replicates `dgp` `opts.reps` times, running every estimator (and its
/// sandwich variance) on each sample. Results do not depend on the worker
/// count.
pub fn run_monte_carlo(
    dgp: &DgpSpec,
    specs: &[EstimatorSpec],
    opts: &McOptions,
) -> Result<McResult> {
    if opts.reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    if specs.is_empty() {
        return Err(Error::InvalidInput("no estimators requested".into()));
    }
    let work = || -> Vec<ReplicationRecord> {
        (0..opts.reps)
            .into_par_iter()
            .map(|rep| run_replication(dgp, specs, opts, rep))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };
    let records = match opts.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    if records.iter().all(|r| r.tau_hat.is_none()) {
        return Err(Error::AllReplicationsFailed(opts.reps));
    }
    let true_tau = dgp.true_tau();
    let estimators = specs
        .iter()
        .map(|spec| summarize(spec, &records, true_tau))
        .collect();
    Ok(McResult {
        summary: McSummary {
            dgp: dgp.name(),
            n: dgp.n,
            e: dgp.e,
            reps: opts.reps,
            seed: opts.seed,
            true_tau,
            estimators,
        },
        records,
    })
}

fn summarize(
    spec: &EstimatorSpec,
    records: &[ReplicationRecord],
    true_tau: f64,
) -> EstimatorSummary {
    let mine: Vec<&ReplicationRecord> = records
        .iter()
        .filter(|r| r.estimator == spec.label)
        .collect();
    let taus: Vec<f64> = mine.iter().filter_map(|r| r.tau_hat).collect();
    let var = variance_with_se(&taus);
    let mean_estimate = if taus.is_empty() {
        f64::NAN
    } else {
        stable_mean(&taus)
    };
    let ses: Vec<f64> = mine.iter().filter_map(|r| r.se_sandwich).collect();
    let boots: Vec<f64> = mine.iter().filter_map(|r| r.var_bootstrap).collect();
    let covered: Vec<bool> = mine
        .iter()
        .filter_map(|r| match (r.tau_hat, r.se_sandwich) {
            (Some(t), Some(s)) => Some((t - true_tau).abs() <= Z_95 * s),
            _ => None,
        })
        .collect();
    EstimatorSummary {
        label: spec.label.clone(),
        method: spec.config.method,
        successes: taus.len(),
        failures: mine.len() - taus.len(),
        mean_estimate,
        mean_bias: mean_estimate - true_tau,
        bias_se: var.map(|(v, _)| (v / taus.len() as f64).sqrt()),
        empirical_variance: var.map(|(v, _)| v),
        empirical_variance_se: var.map(|(_, s)| s),
        mean_sandwich_variance: (!ses.is_empty())
            .then(|| stable_mean(&ses.iter().map(|s| s * s).collect::<Vec<_>>())),
        mean_bootstrap_variance: (!boots.is_empty()).then(|| stable_mean(&boots)),
        coverage: (!covered.is_empty())
            .then(|| covered.iter().filter(|c| **c).count() as f64 / covered.len() as f64),
    }
}

/// Difference of two empirical variances in units of their combined Monte
/// Carlo standard error `√(se_a² + se_b²)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceComparison {
    pub smaller: String,
    pub larger: String,
    pub var_smaller: f64,
    pub var_larger: f64,
    pub combined_se: f64,
    /// `(var_larger − var_smaller) / combined_se`.
    pub z: f64,
}

pub fn compare_variances(
    summary: &McSummary,
    smaller: &str,
    larger: &str,
) -> Option<VarianceComparison> {
    let a = summary.get(smaller)?;
    let b = summary.get(larger)?;
    let (va, sa) = (a.empirical_variance?, a.empirical_variance_se?);
    let (vb, sb) = (b.empirical_variance?, b.empirical_variance_se?);
    let combined_se = (sa * sa + sb * sb).sqrt();
    Some(VarianceComparison {
        smaller: smaller.to_string(),
        larger: larger.to_string(),
        var_smaller: va,
        var_larger: vb,
        combined_se,
        z: (vb - va) / combined_se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub description: String,
    pub passed: bool,
    pub z: Option<f64>,
}

/// Qualitative variance orderings expected for the built-in designs.
pub fn ordering_checks(summary: &McSummary, dgp: &DgpSpec) -> Vec<OrderingCheck> {
    let strict = |smaller: &str, larger: &str| {
        let cmp = compare_variances(summary, smaller, larger);
        OrderingCheck {
            description: format!("var({smaller}) < var({larger}) by more than 2 combined SE"),
            passed: cmp.as_ref().is_some_and(|c| c.z > 2.0),
            z: cmp.map(|c| c.z),
        }
    };
    let weak = |smaller: &str, larger: &str| {
        let cmp = compare_variances(summary, smaller, larger);
        OrderingCheck {
            description: format!("var({smaller}) <= var({larger}) within 2 combined SE"),
            passed: cmp.as_ref().is_some_and(|c| c.z > -2.0),
            z: cmp.map(|c| c.z),
        }
    };
    let mut checks = match dgp.kind {
        DgpKind::Sinusoidal(_) => vec![strict("unadj", "x-reg"), strict("x-ps", "unadj")],
        DgpKind::LatentClass(_) => vec![
            strict("x-ps(x^mim)", "x-ps(x^imp)"),
            strict("x-ps(x^mim)", "x-ps(x)"),
            strict("x-ps(x^mim)", "unadj"),
            weak("x-ps(x^imp)", "x-ps(x)"),
            weak("x-ps(x)", "unadj"),
        ],
        DgpKind::Custom(_) => Vec::new(),
    };
    for est in &summary.estimators {
        let ok = est
            .bias_se
            .is_some_and(|se| est.mean_bias.abs() <= 3.0 * se);
        checks.push(OrderingCheck {
            description: format!("|bias({})| <= 3 SE", est.label),
            passed: ok,
            z: est.bias_se.map(|se| est.mean_bias / se),
        });
    }
    checks
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_number(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Per-replication rows `rep,estimator,tau_hat,se_sandwich`; failed
/// estimates leave the numeric fields empty.
pub fn write_replications_csv<W: Write>(
    records: &[ReplicationRecord],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "rep,estimator,tau_hat,se_sandwich")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{}",
            r.rep,
            csv_field(&r.estimator),
            csv_number(r.tau_hat),
            csv_number(r.se_sandwich)
        )?;
    }
    Ok(())
}
