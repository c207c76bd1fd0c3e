//! Variance estimation: the empirical sandwich from stacked estimating
//! equations, the nonparametric bootstrap, and a Monte Carlo evaluation of
//! the population asymptotic variances for simulation designs.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{Analysis, EstimateResult, EstimatorConfig, Method};
use crate::glm::sigmoid;
use crate::linalg::{dot, Lu, Matrix};
use crate::rng::{substream, StreamRole};
use crate::simulation::{DgpSpec, PopulationDraws};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Bootstrap gives up when more than this share of replicates fail.
pub const MAX_BOOTSTRAP_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    Sandwich,
    Bootstrap,
}

impl VarianceMethod {
    pub fn name(self) -> &'static str {
        match self {
            VarianceMethod::Sandwich => "sandwich",
            VarianceMethod::Bootstrap => "bootstrap",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sandwich" => Some(VarianceMethod::Sandwich),
            "bootstrap" => Some(VarianceMethod::Bootstrap),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub method: VarianceMethod,
    pub tau_hat: f64,
    pub tau_variance: f64,
    pub se: f64,
    pub ci95: [f64; 2],
    /// Bootstrap only: successful and failed replicate counts.
    pub replicates: Option<usize>,
    pub failed_replicates: Option<usize>,
}

impl VarianceReport {
    fn new(method: VarianceMethod, tau_hat: f64, tau_variance: f64) -> Self {
        let se = tau_variance.max(0.0).sqrt();
        Self {
            method,
            tau_hat,
            tau_variance,
            se,
            ci95: [tau_hat - Z_95 * se, tau_hat + Z_95 * se],
            replicates: None,
            failed_replicates: None,
        }
    }
}

/// Logistic nuisance block of an estimating system.
#[derive(Debug, Clone)]
struct LogitBlock {
    design: Matrix,
    clip: f64,
}

/// Stacked estimating equations `θ = (b, μx, β, α)` for one fitted estimator.
///
/// * `b`: retained coefficients of the outcome regression, with equations
///   `ω X (Y − Xᵀb)` over observed units, where `ω = R π / p`.
/// * `μx`: covariate means, `x − μx` (regression estimators only).
/// * `β`: outcome-missingness logistic score `w U (R − p)` (when fitted).
/// * `α`: propensity logistic score `w x̃ (Z − e)` (when fitted).
#[derive(Debug, Clone)]
pub struct EstimatingSystem {
    z: Vec<f64>,
    r: Vec<bool>,
    y: Vec<f64>,
    prior: Vec<f64>,
    outcome_kept: Vec<usize>,
    covariates: Option<Matrix>,
    p_block: Option<LogitBlock>,
    fixed_p: Vec<f64>,
    e_block: Option<LogitBlock>,
    fixed_e: Option<Vec<f64>>,
    mu_off: usize,
    beta_off: usize,
    alpha_off: usize,
    dim: usize,
    theta_hat: Vec<f64>,
}

struct UnitEval {
    p: f64,
    p_active: bool,
    e: Option<f64>,
    e_active: bool,
    sig_p: f64,
    sig_e: f64,
    omega: f64,
    g: Vec<f64>,
    resid: f64,
}

impl EstimatingSystem {
    pub fn from_fit(data: &Dataset, fit: &EstimateResult) -> Result<Self> {
        let n = data.n();
        let outcome_kept: Vec<usize> = (0..fit.outcome_design.ncols())
            .filter(|j| !fit.outcome_fit.dropped_columns.contains(j))
            .collect();
        let covariates = fit.adjustment.as_ref().map(|a| a.covariates.clone());
        let q = covariates.as_ref().map_or(0, Matrix::cols);

        let logit = |design: &Option<crate::glm::DesignMatrix>,
                     glm: &Option<crate::glm::GlmFit>| {
            match (design, glm) {
                (Some(d), Some(f)) => {
                    let kept = f.retained_columns();
                    Some((
                        LogitBlock {
                            design: d.matrix().select_columns(&kept),
                            clip: f.clip,
                        },
                        kept.iter()
                            .map(|&j| f.coefficients[j])
                            .collect::<Vec<f64>>(),
                    ))
                }
                _ => None,
            }
        };
        let p_block = logit(&fit.p.design, &fit.p.fit);
        let e_block = fit.e.as_ref().and_then(|e| logit(&e.design, &e.fit));

        let mut theta_hat: Vec<f64> = outcome_kept
            .iter()
            .map(|&j| fit.outcome_fit.coefficients[j])
            .collect();
        let mu_off = theta_hat.len();
        if let Some(adj) = &fit.adjustment {
            theta_hat.extend_from_slice(&adj.center);
        }
        let beta_off = theta_hat.len();
        if let Some((_, b)) = &p_block {
            theta_hat.extend_from_slice(b);
        }
        let alpha_off = theta_hat.len();
        if let Some((_, a)) = &e_block {
            theta_hat.extend_from_slice(a);
        }
        debug_assert_eq!(mu_off + q, beta_off);
        Ok(Self {
            z: data.treatment_f64(),
            r: data.observed_mask(),
            y: data.outcome_filled(),
            prior: data.prior_weights.clone().unwrap_or_else(|| vec![1.0; n]),
            outcome_kept,
            covariates,
            p_block: p_block.map(|(b, _)| b),
            fixed_p: fit.p.fitted.clone(),
            e_block: e_block.map(|(b, _)| b),
            fixed_e: fit.e.as_ref().map(|e| e.fitted.clone()),
            mu_off,
            beta_off,
            alpha_off,
            dim: theta_hat.len(),
            theta_hat,
        })
    }

    pub fn theta_hat(&self) -> &[f64] {
        &self.theta_hat
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    /// Index of the treatment-effect coordinate in `θ`.
    pub fn tau_index(&self) -> usize {
        1
    }

    fn q(&self) -> usize {
        self.covariates.as_ref().map_or(0, Matrix::cols)
    }

    fn eval(&self, i: usize, theta: &[f64]) -> UnitEval {
        let (p, p_active, sig_p) = match &self.p_block {
            Some(blk) => {
                let s = sigmoid(dot(
                    blk.design.row(i),
                    &theta[self.beta_off..self.alpha_off],
                ));
                let c = s.clamp(blk.clip, 1.0 - blk.clip);
                (c, c == s, s)
            }
            None => (self.fixed_p[i], false, self.fixed_p[i]),
        };
        let (e, e_active, sig_e) = match (&self.e_block, &self.fixed_e) {
            (Some(blk), _) => {
                let s = sigmoid(dot(blk.design.row(i), &theta[self.alpha_off..]));
                let c = s.clamp(blk.clip, 1.0 - blk.clip);
                (Some(c), c == s, s)
            }
            (None, Some(fixed)) => (Some(fixed[i]), false, fixed[i]),
            (None, None) => (None, false, 0.0),
        };
        let omega = if self.r[i] {
            let pi = match e {
                Some(e) if self.z[i] == 1.0 => 1.0 / e,
                Some(e) => 1.0 / (1.0 - e),
                None => 1.0,
            };
            pi / p
        } else {
            0.0
        };
        let q = self.q();
        let z = self.z[i];
        let g: Vec<f64> = self
            .outcome_kept
            .iter()
            .map(|&c| match c {
                0 => 1.0,
                1 => z,
                c if c < 2 + q => {
                    let k = c - 2;
                    self.covariates.as_ref().unwrap()[(i, k)] - theta[self.mu_off + k]
                }
                c => {
                    let k = c - 2 - q;
                    z * (self.covariates.as_ref().unwrap()[(i, k)] - theta[self.mu_off + k])
                }
            })
            .collect();
        let resid = self.y[i] - dot(&g, &theta[..self.mu_off]);
        UnitEval {
            p,
            p_active,
            e,
            e_active,
            sig_p,
            sig_e,
            omega,
            g,
            resid,
        }
    }

    /// `ψᵢ(θ)` for one unit.
    pub fn psi(&self, i: usize, theta: &[f64]) -> Vec<f64> {
        let u = self.eval(i, theta);
        let mut out = vec![0.0; self.dim];
        for (a, ga) in u.g.iter().enumerate() {
            out[a] = u.omega * ga * u.resid;
        }
        if let Some(x) = &self.covariates {
            for k in 0..x.cols() {
                out[self.mu_off + k] = x[(i, k)] - theta[self.mu_off + k];
            }
        }
        let w = self.prior[i];
        if let Some(blk) = &self.p_block {
            let rr = if self.r[i] { 1.0 } else { 0.0 };
            for (j, uj) in blk.design.row(i).iter().enumerate() {
                out[self.beta_off + j] = w * uj * (rr - u.sig_p);
            }
        }
        if let Some(blk) = &self.e_block {
            for (j, xj) in blk.design.row(i).iter().enumerate() {
                out[self.alpha_off + j] = w * xj * (self.z[i] - u.sig_e);
            }
        }
        out
    }

    /// Adds `∂ψᵢ/∂θᵀ` into `acc`.
    fn add_jacobian(&self, i: usize, theta: &[f64], acc: &mut Matrix) {
        let u = self.eval(i, theta);
        let db = self.mu_off;
        let q = self.q();
        let psi_out: Vec<f64> = u.g.iter().map(|ga| u.omega * ga * u.resid).collect();
        if u.omega != 0.0 {
            for a in 0..db {
                for c in 0..db {
                    acc[(a, c)] -= u.omega * u.g[a] * u.g[c];
                }
            }
            if q > 0 {
                // D[a, k] = ∂gₐ/∂μₖ.
                let z = self.z[i];
                let d = |a: usize, k: usize| -> f64 {
                    let c = self.outcome_kept[a];
                    if c == 2 + k {
                        -1.0
                    } else if c == 2 + q + k {
                        -z
                    } else {
                        0.0
                    }
                };
                let b = &theta[..db];
                for k in 0..q {
                    let bd: f64 = (0..db).map(|a| b[a] * d(a, k)).sum();
                    for a in 0..db {
                        acc[(a, self.mu_off + k)] += u.omega * (d(a, k) * u.resid - u.g[a] * bd);
                    }
                }
            }
            if let (Some(blk), true) = (&self.p_block, u.p_active) {
                for (j, uj) in blk.design.row(i).iter().enumerate() {
                    for a in 0..db {
                        acc[(a, self.beta_off + j)] -= psi_out[a] * (1.0 - u.p) * uj;
                    }
                }
            }
            if let (Some(blk), true, Some(e)) = (&self.e_block, u.e_active, u.e) {
                let factor = if self.z[i] == 1.0 { -(1.0 - e) } else { e };
                for (j, xj) in blk.design.row(i).iter().enumerate() {
                    for a in 0..db {
                        acc[(a, self.alpha_off + j)] += psi_out[a] * factor * xj;
                    }
                }
            }
        }
        for k in 0..q {
            acc[(self.mu_off + k, self.mu_off + k)] -= 1.0;
        }
        let w = self.prior[i];
        for (blk, off, s) in [
            (&self.p_block, self.beta_off, u.sig_p),
            (&self.e_block, self.alpha_off, u.sig_e),
        ] {
            if let Some(blk) = blk {
                let row = blk.design.row(i);
                let h = w * s * (1.0 - s);
                for (j1, v1) in row.iter().enumerate() {
                    for (j2, v2) in row.iter().enumerate() {
                        acc[(off + j1, off + j2)] -= h * v1 * v2;
                    }
                }
            }
        }
    }

    pub fn mean_psi(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut m = vec![0.0; self.dim];
        for i in 0..n {
            for (acc, v) in m.iter_mut().zip(self.psi(i, theta)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
        m
    }

    /// `N⁻¹ Σ ∂ψᵢ/∂θᵀ` from the analytic derivatives.
    pub fn mean_jacobian(&self, theta: &[f64]) -> Matrix {
        let mut acc = Matrix::zeros(self.dim, self.dim);
        for i in 0..self.n() {
            self.add_jacobian(i, theta, &mut acc);
        }
        let n = self.n() as f64;
        let data: Vec<f64> = acc.data().iter().map(|v| v / n).collect();
        Matrix::new(self.dim, self.dim, data).expect("finite jacobian")
    }

    /// `Â = −N⁻¹ Σ ∂ψᵢ/∂θᵀ` at `θ̂`.
    pub fn bread(&self) -> Matrix {
        let j = self.mean_jacobian(&self.theta_hat);
        let data: Vec<f64> = j.data().iter().map(|v| -v).collect();
        Matrix::new(self.dim, self.dim, data).expect("finite bread")
    }

    /// `B̂ = N⁻¹ Σ ψᵢψᵢᵀ` at `θ̂`.
    pub fn meat(&self) -> Matrix {
        let mut b = Matrix::zeros(self.dim, self.dim);
        for i in 0..self.n() {
            let psi = self.psi(i, &self.theta_hat);
            for a in 0..self.dim {
                for c in a..self.dim {
                    b[(a, c)] += psi[a] * psi[c];
                }
            }
        }
        let n = self.n() as f64;
        for a in 0..self.dim {
            for c in a..self.dim {
                b[(a, c)] /= n;
                b[(c, a)] = b[(a, c)];
            }
        }
        b
    }

    /// `cᵀ Â⁻¹ B̂ Â⁻ᵀ c / N` for the unit contrast `c` at `tau_index`.
    pub fn tau_variance(&self) -> Result<f64> {
        let lu = Lu::new(&self.bread()).map_err(|_| Error::SingularBread)?;
        let mut c = vec![0.0; self.dim];
        c[self.tau_index()] = 1.0;
        let u = lu.solve_transposed(&c);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularBread);
        }
        let n = self.n() as f64;
        let s: f64 = (0..self.n())
            .map(|i| dot(&u, &self.psi(i, &self.theta_hat)).powi(2))
            .sum();
        Ok(s / (n * n))
    }
}

pub fn sandwich_variance(data: &Dataset, fit: &EstimateResult) -> Result<VarianceReport> {
    let system = EstimatingSystem::from_fit(data, fit)?;
    let v = system.tau_variance()?;
    Ok(VarianceReport::new(
        VarianceMethod::Sandwich,
        fit.tau_hat,
        v,
    ))
}

/// Unit-level resampling with replacement, refitting every nuisance model and
/// estimator per replicate.
pub fn bootstrap_variance(
    data: &Dataset,
    cfg: &EstimatorConfig,
    b: usize,
    seed: u64,
) -> Result<VarianceReport> {
    bootstrap_variances(data, cfg, &[cfg.method], b, seed)?
        .pop()
        .expect("one method requested")
}

/// Shares each resample across `methods`; one result per method.
pub fn bootstrap_variances(
    data: &Dataset,
    cfg: &EstimatorConfig,
    methods: &[Method],
    b: usize,
    seed: u64,
) -> Result<Vec<Result<VarianceReport>>> {
    let n = data.n();
    bootstrap_with_indices(data, cfg, methods, b, |rep| {
        use rand::Rng;
        let mut rng = substream(seed, StreamRole::Bootstrap, rep as u64);
        (0..n).map(|_| rng.random_range(0..n)).collect()
    })
}

/// Bootstrap with caller-supplied resample indices per replicate.
pub fn bootstrap_with_indices<F>(
    data: &Dataset,
    cfg: &EstimatorConfig,
    methods: &[Method],
    b: usize,
    indices: F,
) -> Result<Vec<Result<VarianceReport>>>
where
    F: Fn(usize) -> Vec<usize> + Sync,
{
    if b < 2 {
        return Err(Error::InvalidInput(
            "bootstrap needs at least 2 replicates".into(),
        ));
    }
    let point: Vec<Result<f64>> = match Analysis::new(data, cfg) {
        Ok(a) => methods
            .iter()
            .map(|&m| a.estimate(m).map(|r| r.tau_hat))
            .collect(),
        Err(e) => methods.iter().map(|_| Err(e.clone())).collect(),
    };
    let replicates: Vec<Vec<Option<f64>>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let sample = data.select_rows(&indices(rep));
            match Analysis::new(&sample, cfg) {
                Ok(a) => methods
                    .iter()
                    .map(|&m| a.estimate(m).ok().map(|r| r.tau_hat))
                    .collect(),
                Err(_) => vec![None; methods.len()],
            }
        })
        .collect();
    Ok(methods
        .iter()
        .enumerate()
        .map(|(mi, _)| {
            let tau_hat = point[mi].clone()?;
            let values: Vec<f64> = replicates.iter().filter_map(|r| r[mi]).collect();
            let failed = b - values.len();
            if failed as f64 > MAX_BOOTSTRAP_FAILURE_RATE * b as f64 || values.len() < 2 {
                return Err(Error::TooManyFailures { failed, total: b });
            }
            let mut report =
                VarianceReport::new(VarianceMethod::Bootstrap, tau_hat, sample_variance(&values));
            report.replicates = Some(values.len());
            report.failed_replicates = Some(failed);
            Ok(report)
        })
        .collect())
}

/// Unbiased sample variance (divisor n − 1).
pub fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Population moments behind the asymptotic variances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleTerms {
    pub mu1: f64,
    pub mu0: f64,
    pub mu_x: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub b11: f64,
    pub b22: f64,
    pub b13: Vec<f64>,
    pub b23: Vec<f64>,
    pub b33: Vec<Vec<f64>>,
    pub b11_adj: f64,
    pub b22_adj: f64,
    pub b13_adj: Vec<f64>,
    pub b23_adj: Vec<f64>,
    pub var_proj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub e: f64,
    pub n_mc: usize,
    pub full_data: bool,
    pub v_unadj: f64,
    pub v_xreg: f64,
    pub v_xps: f64,
    /// `v_xps` recomputed from the stacked propensity-weighted system.
    pub v_xps_stack: f64,
    pub se_unadj: f64,
    pub se_xreg: f64,
    pub se_xps: f64,
    pub terms: OracleTerms,
}

/// Draws are generated in fixed-size chunks, one substream per chunk.
const ORACLE_CHUNK: usize = 10_000;
/// Batches for the batch-means Monte Carlo standard errors.
const ORACLE_BATCHES: usize = 100;

/// Evaluates the population asymptotic variances of the unadjusted,
/// regression, and propensity-weighted estimators by Monte Carlo averaging
/// over `n_mc` draws from `dgp`, with batch-means standard errors.
pub fn oracle_asymptotic_variance(dgp: &DgpSpec, n_mc: usize, seed: u64) -> Result<OracleReport> {
    if n_mc < 10 * ORACLE_BATCHES {
        return Err(Error::InvalidInput(format!(
            "oracle needs at least {} draws",
            10 * ORACLE_BATCHES
        )));
    }
    let chunks = n_mc.div_ceil(ORACLE_CHUNK);
    let parts: Vec<PopulationDraws> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let size = ORACLE_CHUNK.min(n_mc - c * ORACLE_CHUNK);
            let mut rng = substream(seed, StreamRole::Oracle, c as u64);
            dgp.population_draws(size, &mut rng)
        })
        .collect::<Result<_>>()?;
    let draws = PopulationDraws::concat(&parts)?;
    let (terms, v) = oracle_from_draws(&draws, 0..draws.len())?;
    let v_xps_stack = oracle_xps_stack(&draws, &terms)?;

    let batch = draws.len() / ORACLE_BATCHES;
    let per_batch: Vec<[f64; 3]> = (0..ORACLE_BATCHES)
        .into_par_iter()
        .map(|b| oracle_from_draws(&draws, b * batch..(b + 1) * batch).map(|(_, v)| v))
        .collect::<Result<_>>()?;
    let se = |k: usize| {
        let vals: Vec<f64> = per_batch.iter().map(|v| v[k]).collect();
        (sample_variance(&vals) / ORACLE_BATCHES as f64).sqrt()
    };
    Ok(OracleReport {
        e: draws.e,
        n_mc: draws.len(),
        full_data: draws.full_data,
        v_unadj: v[0],
        v_xreg: v[1],
        v_xps: v[2],
        v_xps_stack,
        se_unadj: se(0),
        se_xreg: se(1),
        se_xps: se(2),
        terms,
    })
}

fn mean_over(range: &std::ops::Range<usize>, f: impl Fn(usize) -> f64) -> f64 {
    range.clone().map(f).sum::<f64>() / range.len() as f64
}

fn oracle_from_draws(
    d: &PopulationDraws,
    range: std::ops::Range<usize>,
) -> Result<(OracleTerms, [f64; 3])> {
    let e = d.e;
    let j = d.x.cols();
    let ku = d.u1.cols();
    let mu1 = mean_over(&range, |i| d.y1[i]);
    let mu0 = mean_over(&range, |i| d.y0[i]);
    let mu_x: Vec<f64> = (0..j).map(|k| mean_over(&range, |i| d.x[(i, k)])).collect();
    let mut cov_x = Matrix::zeros(j, j);
    for a in 0..j {
        for b in 0..j {
            cov_x[(a, b)] = mean_over(&range, |i| {
                (d.x[(i, a)] - mu_x[a]) * (d.x[(i, b)] - mu_x[b])
            });
        }
    }
    let cov_xy = |y: &[f64], mu: f64| -> Vec<f64> {
        (0..j)
            .map(|a| mean_over(&range, |i| (d.x[(i, a)] - mu_x[a]) * (y[i] - mu)))
            .collect()
    };
    let (gamma1, gamma0) = if j > 0 {
        (
            crate::linalg::solve_spd(&cov_x, &cov_xy(&d.y1, mu1))?,
            crate::linalg::solve_spd(&cov_x, &cov_xy(&d.y0, mu0))?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let centered = |i: usize| -> Vec<f64> { (0..j).map(|a| d.x[(i, a)] - mu_x[a]).collect() };
    let r1 = |i: usize| d.y1[i] - mu1;
    let r0 = |i: usize| d.y0[i] - mu0;
    let r1a = |i: usize| r1(i) - dot(&centered(i), &gamma1);
    let r0a = |i: usize| r0(i) - dot(&centered(i), &gamma0);

    let b11 = e * mean_over(&range, |i| r1(i).powi(2) / d.p1[i]);
    let b22 = (1.0 - e) * mean_over(&range, |i| r0(i).powi(2) / d.p0[i]);
    let b11_adj = e * mean_over(&range, |i| r1a(i).powi(2) / d.p1[i]);
    let b22_adj = (1.0 - e) * mean_over(&range, |i| r0a(i).powi(2) / d.p0[i]);
    let cross = |res: &dyn Fn(usize) -> f64, p: &[f64], u: &Matrix, share: f64| -> Vec<f64> {
        (0..ku)
            .map(|c| share * mean_over(&range, |i| (1.0 - p[i]) * res(i) * u[(i, c)]))
            .collect()
    };
    let b13 = cross(&r1, &d.p1, &d.u1, e);
    let b23 = cross(&r0, &d.p0, &d.u0, 1.0 - e);
    let b13_adj = cross(&r1a, &d.p1, &d.u1, e);
    let b23_adj = cross(&r0a, &d.p0, &d.u0, 1.0 - e);
    let mut b33 = Matrix::zeros(ku, ku);
    for a in 0..ku {
        for c in 0..ku {
            b33[(a, c)] = e * mean_over(&range, |i| {
                d.p1[i] * (1.0 - d.p1[i]) * d.u1[(i, a)] * d.u1[(i, c)]
            }) + (1.0 - e)
                * mean_over(&range, |i| {
                    d.p0[i] * (1.0 - d.p0[i]) * d.u0[(i, a)] * d.u0[(i, c)]
                });
        }
    }

    let correction = |t1: &[f64], t0: &[f64]| -> Result<f64> {
        if d.full_data || ku == 0 {
            return Ok(0.0);
        }
        let q: Vec<f64> = t1
            .iter()
            .zip(t0)
            .map(|(a, b)| a / e - b / (1.0 - e))
            .collect();
        let s = crate::linalg::solve_spd(&b33, &q)?;
        Ok(dot(&q, &s))
    };
    let v_unadj = b11 / (e * e) + b22 / ((1.0 - e) * (1.0 - e)) - correction(&b13, &b23)?;
    let dg: Vec<f64> = gamma1.iter().zip(&gamma0).map(|(a, b)| a - b).collect();
    let quad = |v: &[f64]| -> f64 { dot(v, &cov_x.matvec(v).unwrap_or_default()) };
    let v_xreg = b11_adj / (e * e) + b22_adj / ((1.0 - e) * (1.0 - e))
        - correction(&b13_adj, &b23_adj)?
        + if j > 0 { quad(&dg) } else { 0.0 };
    let combo: Vec<f64> = gamma1
        .iter()
        .zip(&gamma0)
        .map(|(a, b)| a / e + b / (1.0 - e))
        .collect();
    let var_proj = if j > 0 { quad(&combo) } else { 0.0 };
    let v_xps = v_unadj - e * (1.0 - e) * var_proj;

    let rows = |m: &Matrix| (0..m.rows()).map(|a| m.row(a).to_vec()).collect();
    Ok((
        OracleTerms {
            mu1,
            mu0,
            mu_x,
            gamma1,
            gamma0,
            b11,
            b22,
            b13,
            b23,
            b33: rows(&b33),
            b11_adj,
            b22_adj,
            b13_adj,
            b23_adj,
            var_proj,
        },
        [v_unadj, v_xreg, v_xps],
    ))
}

/// Population sandwich of the stacked system `(φ₁, φ₀, ψ_β, ψ_α)` at the
/// true parameters, with the treatment indicator integrated out.
fn oracle_xps_stack(d: &PopulationDraws, t: &OracleTerms) -> Result<f64> {
    let e = d.e;
    let j = d.x.cols();
    let ku = if d.full_data { 0 } else { d.u1.cols() };
    let ka = 1 + j;
    let dim = 2 + ku + ka;
    let (bo, ao) = (2, 2 + ku);
    let range = 0..d.len();
    let xt = |i: usize, a: usize| if a == 0 { 1.0 } else { d.x[(i, a - 1)] };
    let r1 = |i: usize| d.y1[i] - t.mu1;
    let r0 = |i: usize| d.y0[i] - t.mu0;

    let mut a_mat = Matrix::zeros(dim, dim);
    let mut b_mat = Matrix::zeros(dim, dim);
    a_mat[(0, 0)] = 1.0;
    a_mat[(1, 1)] = 1.0;
    b_mat[(0, 0)] = mean_over(&range, |i| r1(i).powi(2) / (d.p1[i] * e));
    b_mat[(1, 1)] = mean_over(&range, |i| r0(i).powi(2) / (d.p0[i] * (1.0 - e)));
    for c in 0..ku {
        let v1 = mean_over(&range, |i| (1.0 - d.p1[i]) * r1(i) * d.u1[(i, c)]);
        let v0 = mean_over(&range, |i| (1.0 - d.p0[i]) * r0(i) * d.u0[(i, c)]);
        a_mat[(0, bo + c)] = v1;
        a_mat[(1, bo + c)] = v0;
        b_mat[(0, bo + c)] = v1;
        b_mat[(bo + c, 0)] = v1;
        b_mat[(1, bo + c)] = v0;
        b_mat[(bo + c, 1)] = v0;
        for c2 in 0..ku {
            a_mat[(bo + c, bo + c2)] = t.b33[c][c2];
            b_mat[(bo + c, bo + c2)] = t.b33[c][c2];
        }
    }
    for a in 0..ka {
        let v1 = mean_over(&range, |i| (1.0 - e) * r1(i) * xt(i, a));
        let v0 = -mean_over(&range, |i| e * r0(i) * xt(i, a));
        a_mat[(0, ao + a)] = v1;
        a_mat[(1, ao + a)] = v0;
        b_mat[(0, ao + a)] = v1;
        b_mat[(ao + a, 0)] = v1;
        b_mat[(1, ao + a)] = v0;
        b_mat[(ao + a, 1)] = v0;
        for a2 in 0..ka {
            let v = e * (1.0 - e) * mean_over(&range, |i| xt(i, a) * xt(i, a2));
            a_mat[(ao + a, ao + a2)] = v;
            b_mat[(ao + a, ao + a2)] = v;
        }
    }
    let lu = Lu::new(&a_mat).map_err(|_| Error::SingularBread)?;
    let mut c = vec![0.0; dim];
    c[0] = 1.0;
    c[1] = -1.0;
    let u = lu.solve_transposed(&c);
    let bu = b_mat.matvec(&u)?;
    Ok(dot(&u, &bu))
}
