//! Point estimators of the average treatment effect under missing outcomes:
//! unadjusted, interacted regression, propensity-weighted, and doubly robust.
//!
//! All four are weighted least-squares fits over units with an observed
//! outcome. The outcome-observation probability p̂ is fitted once over all
//! units and shared; the treatment propensity ê (when used) is also fitted
//! over all units.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::glm::{self, DesignMatrix, GlmFit, LogisticOptions, WlsFit};
use crate::linalg::Matrix;
use crate::missing::{augment_mim, AugmentedCovariates, CovariateSelector};

/// Above this a final weight is reported as extreme.
pub const EXTREME_WEIGHT: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "unadj")]
    Unadj,
    #[serde(rename = "x-reg")]
    XReg,
    #[serde(rename = "x-ps")]
    XPs,
    #[serde(rename = "dr")]
    Dr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Unadj, Method::XReg, Method::XPs, Method::Dr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unadj => "unadj",
            Method::XReg => "x-reg",
            Method::XPs => "x-ps",
            Method::Dr => "dr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn uses_propensity(self) -> bool {
        matches!(self, Method::XPs | Method::Dr)
    }

    pub fn uses_regression(self) -> bool {
        matches!(self, Method::XReg | Method::Dr)
    }
}

/// Columns of the outcome-missingness design `U`: an intercept, the selected
/// covariates, optionally `Z`, and optionally covariate-by-`Z` products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PModelDesign {
    pub covariates: CovariateSelector,
    pub treatment: bool,
    pub interaction: bool,
}

impl Default for PModelDesign {
    fn default() -> Self {
        Self {
            covariates: CovariateSelector::FullMim,
            treatment: true,
            interaction: true,
        }
    }
}

impl PModelDesign {
    pub fn covariates_only(covariates: CovariateSelector) -> Self {
        Self {
            covariates,
            treatment: false,
            interaction: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: Method,
    pub pmodel: PModelDesign,
    /// Covariates for the propensity model, and for the outcome regression
    /// of the x-reg and dr estimators.
    pub emodel: CovariateSelector,
    /// Imputation constants for partially observed covariates; zeros if unset.
    pub imputation_constants: Option<Vec<f64>>,
    pub logistic: LogisticOptions,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            method: Method::Unadj,
            pmodel: PModelDesign::default(),
            emodel: CovariateSelector::FullMim,
            imputation_constants: None,
            logistic: LogisticOptions::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }
}

/// A fitted (or injected) nuisance probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Nuisance {
    /// `None` when the probabilities were injected or fixed at 1.
    pub design: Option<DesignMatrix>,
    pub fit: Option<GlmFit>,
    pub fitted: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmMeans {
    pub treated: f64,
    pub control: f64,
}

/// Covariates used by the interacted regression, before centring.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjustment {
    pub covariates: Matrix,
    pub labels: Vec<String>,
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub min_weight: f64,
    pub max_weight: f64,
    /// `(Σw)² / Σw²` over units with an observed outcome.
    pub effective_sample_size: f64,
    pub extreme_weights: bool,
    pub p_fixed_at_one: bool,
    pub p_converged: Option<bool>,
    pub p_iterations: Option<usize>,
    pub e_converged: Option<bool>,
    pub e_iterations: Option<usize>,
    pub p_dropped_columns: Vec<String>,
    pub e_dropped_columns: Vec<String>,
    pub outcome_dropped_columns: Vec<String>,
    pub flagged_indicator_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub method: Method,
    pub tau_hat: f64,
    pub n: usize,
    pub n_used: usize,
    /// Final regression weight per unit; zero where the outcome is missing.
    pub weights: Vec<f64>,
    pub p: Nuisance,
    pub e: Option<Nuisance>,
    pub components: ArmMeans,
    pub outcome_design: DesignMatrix,
    pub outcome_fit: WlsFit,
    pub adjustment: Option<Adjustment>,
    /// The augmented inverse-weighting sum built from the same outcome fit
    /// (x-reg and dr only); equals `tau_hat` up to rounding.
    pub tau_aipw: Option<f64>,
    pub diagnostics: Diagnostics,
}

/// Shared state for estimating several effects from one dataset: the
/// augmented covariates, the p̂ fit, and a lazily fitted ê.
pub struct Analysis<'a> {
    data: &'a Dataset,
    cfg: EstimatorConfig,
    z: Vec<f64>,
    r: Vec<bool>,
    y: Vec<f64>,
    augmented: AugmentedCovariates,
    p: Nuisance,
    e_injected: Option<Vec<f64>>,
    e_cache: OnceLock<Result<Nuisance>>,
}

fn arm_name(treated: bool) -> &'static str {
    if treated {
        "treated"
    } else {
        "control"
    }
}

fn check_probabilities(p: &[f64], n: usize, what: &'static str) -> Result<()> {
    if p.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {} values for {n} units",
            p.len()
        )));
    }
    if p.iter().any(|v| !(v.is_finite() && *v > 0.0 && *v <= 1.0)) {
        return Err(Error::InvalidInput(format!("{what} must lie in (0, 1]")));
    }
    Ok(())
}

impl<'a> Analysis<'a> {
    /// Fits p̂ over all units. When every outcome is observed, p̂ is fixed
    /// at 1 and no model is fitted.
    pub fn new(data: &'a Dataset, cfg: &EstimatorConfig) -> Result<Self> {
        Self::with_nuisance(data, cfg, None, None)
    }

    /// Bypasses the nuisance fits with known probabilities.
    pub fn with_nuisance(
        data: &'a Dataset,
        cfg: &EstimatorConfig,
        p_hat: Option<Vec<f64>>,
        e_hat: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = data.n();
        let k = data.covariates.num_partial();
        let c = cfg
            .imputation_constants
            .clone()
            .unwrap_or_else(|| vec![0.0; k]);
        let augmented = augment_mim(&data.covariates, &c)?;
        let z = data.treatment_f64();
        let r = data.observed_mask();
        let y = data.outcome_filled();
        let mut analysis = Self {
            data,
            cfg: cfg.clone(),
            z,
            r,
            y,
            augmented,
            p: Nuisance {
                design: None,
                fit: None,
                fitted: vec![1.0; n],
            },
            e_injected: None,
            e_cache: OnceLock::new(),
        };
        if let Some(e) = e_hat {
            check_probabilities(&e, n, "injected propensities")?;
            if e.iter().any(|v| *v >= 1.0) {
                return Err(Error::InvalidInput(
                    "injected propensities must be below 1".into(),
                ));
            }
            analysis.e_injected = Some(e);
        }
        match p_hat {
            Some(p) => {
                check_probabilities(&p, n, "injected observation probabilities")?;
                analysis.p.fitted = p;
            }
            None if analysis.r.iter().all(|&r| r) => {}
            None => {
                let design = analysis.p_design();
                let response: Vec<f64> = analysis
                    .r
                    .iter()
                    .map(|&r| if r { 1.0 } else { 0.0 })
                    .collect();
                let fit = glm::fit_logistic_with(
                    &design,
                    &response,
                    data.prior_weights.as_deref(),
                    &cfg.logistic,
                )?;
                analysis.p = Nuisance {
                    fitted: fit.fitted_probabilities.clone(),
                    design: Some(design),
                    fit: Some(fit),
                };
            }
        }
        Ok(analysis)
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn augmented(&self) -> &AugmentedCovariates {
        &self.augmented
    }

    pub fn p(&self) -> &Nuisance {
        &self.p
    }

    fn selected(&self, selector: CovariateSelector) -> (Matrix, Vec<String>) {
        crate::missing::subset_covariates(&self.augmented, selector)
    }

    /// `U = (1, x_sel, Z, x_sel·Z)` per the configured design.
    pub fn p_design(&self) -> DesignMatrix {
        let (x, labels) = self.selected(self.cfg.pmodel.covariates);
        let n = self.data.n();
        let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
        let mut names = vec!["(intercept)".to_string()];
        for j in 0..x.cols() {
            cols.push(x.column(j));
            names.push(labels[j].clone());
        }
        if self.cfg.pmodel.treatment {
            cols.push(self.z.clone());
            names.push("Z".into());
        }
        if self.cfg.pmodel.interaction {
            for j in 0..x.cols() {
                cols.push((0..n).map(|i| x[(i, j)] * self.z[i]).collect());
                names.push(format!("Z:{}", labels[j]));
            }
        }
        let m = Matrix::from_columns(n, &cols).expect("finite design columns");
        DesignMatrix::new(m, names).expect("labels match columns")
    }

    pub fn e_design(&self) -> DesignMatrix {
        let (x, labels) = self.selected(self.cfg.emodel);
        DesignMatrix::with_intercept(&x, &labels).expect("labels match columns")
    }

    /// ê over all units; fitted on first use.
    pub fn e(&self) -> Result<&Nuisance> {
        self.e_cache
            .get_or_init(|| {
                if let Some(e) = &self.e_injected {
                    return Ok(Nuisance {
                        design: None,
                        fit: None,
                        fitted: e.clone(),
                    });
                }
                let design = self.e_design();
                let fit = glm::fit_logistic_with(
                    &design,
                    &self.z,
                    self.data.prior_weights.as_deref(),
                    &self.cfg.logistic,
                )?;
                Ok(Nuisance {
                    fitted: fit.fitted_probabilities.clone(),
                    design: Some(design),
                    fit: Some(fit),
                })
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    fn check_arms(&self) -> Result<()> {
        for arm in [true, false] {
            let any = (0..self.data.n()).any(|i| self.r[i] && self.data.treatment[i] == arm);
            if !any {
                return Err(Error::DegenerateArm { arm: arm_name(arm) });
            }
        }
        Ok(())
    }

    pub fn estimate(&self, method: Method) -> Result<EstimateResult> {
        self.check_arms()?;
        let n = self.data.n();
        let e = if method.uses_propensity() {
            Some(self.e()?.clone())
        } else {
            None
        };
        let p = &self.p.fitted;
        let weights: Vec<f64> = (0..n)
            .map(|i| {
                if !self.r[i] {
                    return 0.0;
                }
                let pi = match &e {
                    Some(e) => propensity_factor(self.data.treatment[i], e.fitted[i]),
                    None => 1.0,
                };
                pi / p[i]
            })
            .collect();

        let (design, adjustment) = if method.uses_regression() {
            let (x, labels) = self.selected(self.cfg.emodel);
            let center: Vec<f64> = (0..x.cols())
                .map(|j| x.column(j).iter().sum::<f64>() / n as f64)
                .collect();
            let design = interacted_design(&x, &labels, &center, &self.z);
            (
                design,
                Some(Adjustment {
                    covariates: x,
                    labels,
                    center,
                }),
            )
        } else {
            (difference_design(&self.z), None)
        };

        let fit = glm::fit_wls(&design, &self.y, &weights)?;
        if fit.dropped_columns.contains(&0) || fit.dropped_columns.contains(&1) {
            return Err(Error::RankError(
                "intercept or treatment column is collinear with the covariates".into(),
            ));
        }
        let tau_hat = fit.coefficients[1];

        let (components, tau_aipw) = match &adjustment {
            Some(adj) => {
                let comps = ArmMeans {
                    treated: fit.coefficients[0] + fit.coefficients[1],
                    control: fit.coefficients[0],
                };
                let e_for_sum: Vec<f64> = match &e {
                    Some(e) => e.fitted.clone(),
                    None => {
                        let share = self.z.iter().sum::<f64>() / n as f64;
                        vec![share; n]
                    }
                };
                let aipw = aipw_sum(
                    &fit.coefficients,
                    &adj.covariates,
                    &adj.center,
                    &self.data.treatment,
                    &self.r,
                    &self.y,
                    p,
                    &e_for_sum,
                );
                (comps, Some(aipw))
            }
            None => {
                let (treated, control) = hajek_components(&self.y, &self.data.treatment, &weights)?;
                (ArmMeans { treated, control }, None)
            }
        };

        let observed: Vec<f64> = weights
            .iter()
            .zip(&self.r)
            .filter(|(_, r)| **r)
            .map(|(w, _)| *w)
            .collect();
        let sum: f64 = observed.iter().sum();
        let sum_sq: f64 = observed.iter().map(|w| w * w).sum();
        let max_weight = observed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let names = |fit: Option<&GlmFit>| {
            fit.map(|f| {
                f.dropped_columns
                    .iter()
                    .map(|&j| f.labels[j].clone())
                    .collect()
            })
            .unwrap_or_default()
        };
        let diagnostics = Diagnostics {
            min_weight: observed.iter().cloned().fold(f64::INFINITY, f64::min),
            max_weight,
            effective_sample_size: sum * sum / sum_sq,
            extreme_weights: max_weight > EXTREME_WEIGHT,
            p_fixed_at_one: self.p.fit.is_none() && self.p.fitted.iter().all(|&v| v == 1.0),
            p_converged: self.p.fit.as_ref().map(|f| f.converged),
            p_iterations: self.p.fit.as_ref().map(|f| f.iterations),
            e_converged: e.as_ref().and_then(|e| e.fit.as_ref()).map(|f| f.converged),
            e_iterations: e
                .as_ref()
                .and_then(|e| e.fit.as_ref())
                .map(|f| f.iterations),
            p_dropped_columns: names(self.p.fit.as_ref()),
            e_dropped_columns: names(e.as_ref().and_then(|e| e.fit.as_ref())),
            outcome_dropped_columns: fit
                .dropped_columns
                .iter()
                .map(|&j| fit.design_labels[j].clone())
                .collect(),
            flagged_indicator_columns: self
                .augmented
                .dropped_indicator_columns
                .iter()
                .map(|&j| self.augmented.labels[j].clone())
                .collect(),
        };

        Ok(EstimateResult {
            method,
            tau_hat,
            n,
            n_used: observed.len(),
            weights,
            p: self.p.clone(),
            e,
            components,
            outcome_design: design,
            outcome_fit: fit,
            adjustment,
            tau_aipw,
            diagnostics,
        })
    }
}

/// `Z/ê + (1−Z)/(1−ê)` for one unit.
pub fn propensity_factor(treated: bool, e: f64) -> f64 {
    if treated {
        1.0 / e
    } else {
        1.0 / (1.0 - e)
    }
}

fn difference_design(z: &[f64]) -> DesignMatrix {
    let n = z.len();
    let m = Matrix::from_columns(n, &[vec![1.0; n], z.to_vec()]).expect("finite");
    DesignMatrix::new(m, vec!["(intercept)".into(), "Z".into()]).expect("labels")
}

/// `(1, Z, x − center, Z(x − center))`.
pub fn interacted_design(x: &Matrix, labels: &[String], center: &[f64], z: &[f64]) -> DesignMatrix {
    let n = x.rows();
    let q = x.cols();
    let mut data = Vec::with_capacity(n * (2 + 2 * q));
    for i in 0..n {
        data.push(1.0);
        data.push(z[i]);
        let row = x.row(i);
        for j in 0..q {
            data.push(row[j] - center[j]);
        }
        for j in 0..q {
            data.push(z[i] * (row[j] - center[j]));
        }
    }
    let mut names = vec!["(intercept)".to_string(), "Z".to_string()];
    names.extend(labels.iter().cloned());
    names.extend(labels.iter().map(|l| format!("Z:{l}")));
    DesignMatrix::new(Matrix::new(n, 2 + 2 * q, data).expect("finite"), names).expect("labels")
}

/// `N⁻¹ Σ [m̂₁ − m̂₀ + R/p̂ {Z(Y − m̂₁)/e − (1−Z)(Y − m̂₀)/(1−e)}]` with the
/// arm-specific linear predictions read off interacted coefficients.
#[allow(clippy::too_many_arguments)]
fn aipw_sum(
    coef: &[f64],
    x: &Matrix,
    center: &[f64],
    treated: &[bool],
    r: &[bool],
    y: &[f64],
    p: &[f64],
    e: &[f64],
) -> f64 {
    let q = x.cols();
    let n = x.rows();
    let mut total = 0.0;
    for i in 0..n {
        let row = x.row(i);
        let mut m0 = coef[0];
        let mut m1 = coef[0] + coef[1];
        for j in 0..q {
            let d = row[j] - center[j];
            m0 += coef[2 + j] * d;
            m1 += (coef[2 + j] + coef[2 + q + j]) * d;
        }
        let mut term = m1 - m0;
        if r[i] {
            if treated[i] {
                term += (y[i] - m1) / (p[i] * e[i]);
            } else {
                term -= (y[i] - m0) / (p[i] * (1.0 - e[i]));
            }
        }
        total += term;
    }
    total / n as f64
}

/// Weighted arm means `(Ŷ(1), Ŷ(0))`.
pub fn hajek_components(y: &[f64], z: &[bool], weights: &[f64]) -> Result<(f64, f64)> {
    if y.len() != z.len() || y.len() != weights.len() {
        return Err(Error::DimensionMismatch("hajek inputs".into()));
    }
    let mut out = [0.0; 2];
    for (slot, arm) in [(0, true), (1, false)] {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..y.len() {
            if z[i] == arm {
                num += weights[i] * y[i];
                den += weights[i];
            }
        }
        if den <= 0.0 {
            return Err(Error::DegenerateArm { arm: arm_name(arm) });
        }
        out[slot] = num / den;
    }
    Ok((out[0], out[1]))
}

pub fn estimate(data: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateResult> {
    Analysis::new(data, cfg)?.estimate(cfg.method)
}

pub fn estimate_unadj(data: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateResult> {
    Analysis::new(data, cfg)?.estimate(Method::Unadj)
}

pub fn estimate_xreg(data: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateResult> {
    Analysis::new(data, cfg)?.estimate(Method::XReg)
}

pub fn estimate_xps(data: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateResult> {
    Analysis::new(data, cfg)?.estimate(Method::XPs)
}

pub fn estimate_dr(data: &Dataset, cfg: &EstimatorConfig) -> Result<EstimateResult> {
    Analysis::new(data, cfg)?.estimate(Method::Dr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{fit_logistic, sigmoid};
    use crate::missing::PartialCovariates;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn labels(prefix: &str, k: usize) -> Vec<String> {
        (0..k).map(|j| format!("{prefix}{j}")).collect()
    }

    fn simple_dataset(x: &[f64], z: &[bool], y: &[Option<f64>]) -> Dataset {
        let pc = PartialCovariates::fully_observed_only(
            Matrix::column_vector(x).unwrap(),
            vec!["x".into()],
        )
        .unwrap();
        Dataset::new(pc, z.to_vec(), y.to_vec()).unwrap()
    }

    /// n units, one fully observed covariate pair, `k` partial covariates,
    /// logistic outcome missingness.
    fn random_dataset(seed: u64, n: usize, k: usize, missing_outcomes: bool) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n * 2);
        let mut w = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let x1: f64 = StandardNormal.sample(&mut rng);
            let x2: f64 = rng.random_range(-1.0..1.0);
            x.extend([x1, x2]);
            let row: Vec<Option<f64>> = (0..k)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    (rng.random::<f64>() < 0.75).then_some(v + 0.5 * x1)
                })
                .collect();
            let zi = rng.random::<f64>() < 0.4;
            let noise: f64 = StandardNormal.sample(&mut rng);
            let wsum: f64 = row.iter().flatten().sum();
            let yi =
                1.0 + 2.0 * x1 - x2 + 0.5 * wsum + if zi { 1.5 + x1 * x2 } else { 0.0 } + noise;
            let pi = sigmoid(1.2 + 0.6 * x1);
            let observed = !missing_outcomes || rng.random::<f64>() < pi;
            w.push(row);
            z.push(zi);
            y.push(observed.then_some(yi));
        }
        let pc = PartialCovariates::new(
            Matrix::new(n, 2, x).unwrap(),
            labels("x", 2),
            w,
            labels("w", k),
        )
        .unwrap();
        Dataset::new(pc, z, y).unwrap()
    }

    fn small_cfg() -> EstimatorConfig {
        EstimatorConfig {
            pmodel: PModelDesign {
                covariates: CovariateSelector::FullyObservedOnly,
                treatment: true,
                interaction: false,
            },
            ..Default::default()
        }
    }

    #[test]
    fn full_data_difference_in_means() {
        let d = simple_dataset(
            &[0.1, 0.2, 0.3, 0.4],
            &[true, true, false, false],
            &[Some(3.0), Some(5.0), Some(1.0), Some(3.0)],
        );
        let cfg = EstimatorConfig {
            pmodel: PModelDesign::covariates_only(CovariateSelector::Empty),
            ..Default::default()
        };
        let res = estimate_unadj(&d, &cfg).unwrap();
        assert!((res.tau_hat - 2.0).abs() < 1e-12);
        assert!(res.diagnostics.p_fixed_at_one);
    }

    #[test]
    fn injected_probabilities_hajek_ratio() {
        let d = simple_dataset(
            &[0.0; 6],
            &[true, true, true, false, false, false],
            &[Some(1.0), Some(4.0), None, Some(2.0), Some(6.0), Some(-1.0)],
        );
        let p = vec![0.5, 0.8, 0.5, 0.8, 0.5, 0.8];
        let a = Analysis::with_nuisance(&d, &small_cfg(), Some(p), None).unwrap();
        let res = a.estimate(Method::Unadj).unwrap();
        // Treated: (1/0.5·1 + 1/0.8·4) / (2 + 1.25) = 7/3.25.
        // Control: (2/0.8 + 6/0.5 − 1/0.8) / (1.25 + 2 + 1.25) = 13.25/4.5.
        let expected = 7.0 / 3.25 - 13.25 / 4.5;
        assert!((res.tau_hat - expected).abs() < 1e-12);
        assert!((res.components.treated - 7.0 / 3.25).abs() < 1e-12);
        assert_eq!(res.weights[2], 0.0);
        assert_eq!(res.n_used, 5);
    }

    #[test]
    fn weight_scale_leaves_unadj_unchanged() {
        let d = random_dataset(3, 60, 0, true);
        let p: Vec<f64> = (0..60).map(|i| 0.3 + 0.01 * i as f64).collect();
        let scaled: Vec<f64> = p.iter().map(|v| v * 0.7).collect();
        let a = Analysis::with_nuisance(&d, &small_cfg(), Some(p), None).unwrap();
        let b = Analysis::with_nuisance(&d, &small_cfg(), Some(scaled), None).unwrap();
        let ta = a.estimate(Method::Unadj).unwrap().tau_hat;
        let tb = b.estimate(Method::Unadj).unwrap().tau_hat;
        assert!((ta - tb).abs() < 1e-12);
    }

    #[test]
    fn degenerate_arm_reported() {
        let d = simple_dataset(
            &[0.0, 1.0, 2.0, 3.0],
            &[true, true, false, false],
            &[Some(1.0), Some(2.0), None, None],
        );
        let p = vec![0.5; 4];
        let a = Analysis::with_nuisance(&d, &small_cfg(), Some(p), None).unwrap();
        assert_eq!(
            a.estimate(Method::Unadj),
            Err(Error::DegenerateArm { arm: "control" })
        );
    }

    #[test]
    fn xreg_exact_linear_outcomes() {
        let x = [-2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 0.5, -0.5];
        let z = [true, false, true, false, true, false, true, false];
        let y: Vec<Option<f64>> = x
            .iter()
            .zip(&z)
            .map(|(x, z)| Some(if *z { 1.0 + 3.0 * x } else { 2.0 - x }))
            .collect();
        let d = simple_dataset(&x, &z, &y);
        let res = estimate_xreg(&d, &EstimatorConfig::default()).unwrap();
        let xbar = x.iter().sum::<f64>() / 8.0;
        let truth = (1.0 + 3.0 * xbar) - (2.0 - xbar);
        assert!((res.tau_hat - truth).abs() < 1e-10);
        for r in &res.outcome_fit.residuals {
            assert!(r.abs() < 1e-10);
        }
    }

    #[test]
    fn xps_with_empty_emodel_equals_unadj() {
        let d = random_dataset(11, 120, 2, true);
        let cfg = EstimatorConfig {
            emodel: CovariateSelector::Empty,
            ..small_cfg()
        };
        let a = Analysis::new(&d, &cfg).unwrap();
        let u = a.estimate(Method::Unadj).unwrap().tau_hat;
        let x = a.estimate(Method::XPs).unwrap().tau_hat;
        assert!((u - x).abs() < 1e-10);
    }

    #[test]
    fn xps_balanced_covariate_gives_zero_slope() {
        // Within each arm the covariate takes the same values, so the
        // propensity slope is exactly zero.
        let x = [-1.0, 0.0, 1.0, 2.0, -1.0, 0.0, 1.0, 2.0];
        let z = [true, true, true, true, false, false, false, false];
        let y: Vec<Option<f64>> = [3.0, 1.0, 4.0, 1.5, 0.5, 2.0, -1.0, 0.0]
            .iter()
            .map(|v| Some(*v))
            .collect();
        let d = simple_dataset(&x, &z, &y);
        let cfg = EstimatorConfig {
            emodel: CovariateSelector::FullyObservedOnly,
            ..Default::default()
        };
        let a = Analysis::new(&d, &cfg).unwrap();
        let xps = a.estimate(Method::XPs).unwrap();
        let slope = xps.e.as_ref().unwrap().fit.as_ref().unwrap().coefficients[1];
        assert!(slope.abs() <= 1e-8);
        let unadj = a.estimate(Method::Unadj).unwrap().tau_hat;
        assert!((xps.tau_hat - unadj).abs() < 1e-10);
    }

    #[test]
    fn dr_with_constant_propensity_equals_xreg() {
        let d = random_dataset(5, 150, 1, true);
        let cfg = EstimatorConfig {
            emodel: CovariateSelector::Empty,
            ..small_cfg()
        };
        let a = Analysis::new(&d, &cfg).unwrap();
        let xr = a.estimate(Method::XReg).unwrap().tau_hat;
        let dr = a.estimate(Method::Dr).unwrap().tau_hat;
        assert!((xr - dr).abs() < 1e-9);
    }

    #[test]
    fn dr_full_data_matches_direct_sum() {
        let d = random_dataset(9, 80, 0, false);
        let cfg = EstimatorConfig {
            emodel: CovariateSelector::FullyObservedOnly,
            ..Default::default()
        };
        let res = estimate_dr(&d, &cfg).unwrap();
        assert!(res.diagnostics.p_fixed_at_one);
        // Independent evaluation: per-arm weighted fits on centred x with
        // weights 1/ê and 1/(1−ê), then the augmented sum.
        let e = &res.e.as_ref().unwrap().fitted;
        let x = d.covariates.fully_observed();
        let n = d.n();
        let center: Vec<f64> = (0..2)
            .map(|j| x.column(j).iter().sum::<f64>() / n as f64)
            .collect();
        let arm_fit = |arm: bool| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| vec![1.0, x[(i, 0)] - center[0], x[(i, 1)] - center[1]])
                .collect();
            let w: Vec<f64> = (0..n)
                .map(|i| {
                    if d.treatment[i] != arm {
                        0.0
                    } else if arm {
                        1.0 / e[i]
                    } else {
                        1.0 / (1.0 - e[i])
                    }
                })
                .collect();
            crate::linalg::solve_least_squares(
                &Matrix::from_rows(&rows).unwrap(),
                &w,
                &d.outcome_filled(),
            )
            .unwrap()
            .coefficients
        };
        let (g1, g0) = (arm_fit(true), arm_fit(false));
        let y = d.outcome_filled();
        let mut total = 0.0;
        for i in 0..n {
            let (d0, d1) = (x[(i, 0)] - center[0], x[(i, 1)] - center[1]);
            let m1 = g1[0] + g1[1] * d0 + g1[2] * d1;
            let m0 = g0[0] + g0[1] * d0 + g0[2] * d1;
            total += m1 - m0;
            if d.treatment[i] {
                total += (y[i] - m1) / e[i];
            } else {
                total -= (y[i] - m0) / (1.0 - e[i]);
            }
        }
        assert!((res.tau_hat - total / n as f64).abs() < 1e-9);
    }

    #[test]
    fn hajek_examples() {
        let (t, c) = hajek_components(
            &[1.0, 3.0, 5.0, 7.0],
            &[true, true, false, false],
            &[1.0; 4],
        )
        .unwrap();
        assert_eq!((t, c), (2.0, 6.0));
        let (t, _) =
            hajek_components(&[1.0, 3.0, 0.0], &[true, true, false], &[2.0, 2.0, 1.0]).unwrap();
        assert_eq!(t, 2.0);
        assert!(hajek_components(&[1.0], &[true], &[1.0]).is_err());
    }

    #[test]
    fn hajek_matches_wls_decomposition() {
        let d = random_dataset(21, 90, 0, true);
        let res = estimate_unadj(&d, &small_cfg()).unwrap();
        let c = &res.outcome_fit.coefficients;
        assert!((res.components.control - c[0]).abs() < 1e-10);
        assert!((res.components.treated - (c[0] + c[1])).abs() < 1e-10);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
    }

    /// Augmented sum with a constant propensity, coded from scratch.
    fn aipw_oracle(d: &Dataset, res: &EstimateResult, e_const: Option<f64>) -> f64 {
        let n = d.n();
        let adj = res.adjustment.as_ref().unwrap();
        let q = adj.covariates.cols();
        let c = &res.outcome_fit.coefficients;
        let e_share =
            e_const.unwrap_or_else(|| d.treatment.iter().filter(|t| **t).count() as f64 / n as f64);
        let mut s1 = 0.0;
        let mut s0 = 0.0;
        for i in 0..n {
            let xc: Vec<f64> = (0..q)
                .map(|j| adj.covariates[(i, j)] - adj.center[j])
                .collect();
            let m0: f64 = c[0] + (0..q).map(|j| c[2 + j] * xc[j]).sum::<f64>();
            let m1: f64 = c[0]
                + c[1]
                + (0..q)
                    .map(|j| (c[2 + j] + c[2 + q + j]) * xc[j])
                    .sum::<f64>();
            s1 += m1;
            s0 += m0;
            if let Some(y) = d.outcome[i] {
                let p = res.p.fitted[i];
                if d.treatment[i] {
                    s1 += (y - m1) / (p * e_share);
                } else {
                    s0 += (y - m0) / (p * (1.0 - e_share));
                }
            }
        }
        (s1 - s0) / n as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn identities_hold(seed in any::<u64>(), n in 30usize..200) {
            let d = random_dataset(seed, n, 2, true);
            let cfg = EstimatorConfig { emodel: CovariateSelector::FullMim, ..small_cfg() };
            let a = match Analysis::new(&d, &cfg) { Ok(a) => a, Err(_) => return Ok(()) };
            let unadj = a.estimate(Method::Unadj);
            prop_assume!(unadj.is_ok());
            let unadj = unadj.unwrap();
            prop_assert!((unadj.tau_hat - (unadj.components.treated - unadj.components.control)).abs() <= 1e-10);
            let obs: Vec<usize> = (0..n).filter(|&i| d.outcome[i].is_some()).collect();
            // Independent Hájek ratio.
            let (mut n1, mut d1, mut n0, mut d0) = (0.0, 0.0, 0.0, 0.0);
            for &i in &obs {
                let w = 1.0 / unadj.p.fitted[i];
                let y = d.outcome[i].unwrap();
                if d.treatment[i] { n1 += w * y; d1 += w; } else { n0 += w * y; d0 += w; }
            }
            prop_assert!((unadj.tau_hat - (n1 / d1 - n0 / d0)).abs() <= 1e-10);

            if let Ok(xreg) = a.estimate(Method::XReg) {
                let oracle = aipw_oracle(&d, &xreg, None);
                prop_assert!((xreg.tau_hat - oracle).abs() <= 1e-9, "{} vs {}", xreg.tau_hat, oracle);
                let oracle2 = aipw_oracle(&d, &xreg, Some(0.37));
                prop_assert!((xreg.tau_hat - oracle2).abs() <= 1e-9);
                prop_assert!((xreg.tau_hat - xreg.tau_aipw.unwrap()).abs() <= 1e-9);
            }
            if let Ok(dr) = a.estimate(Method::Dr) {
                prop_assert!((dr.tau_hat - dr.tau_aipw.unwrap()).abs() <= 1e-9);
            }
        }

        #[test]
        fn translation_invariance(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let d = random_dataset(seed, 100, 1, true);
            let mut shifted = d.clone();
            for y in shifted.outcome.iter_mut().flatten() { *y += shift; }
            let cfg = small_cfg();
            for m in Method::ALL {
                if let (Ok(a), Ok(b)) = (estimate(&d, &cfg.with_method(m)), estimate(&shifted, &cfg.with_method(m))) {
                    prop_assert!((a.tau_hat - b.tau_hat).abs() <= 1e-10 * (1.0 + shift.abs()));
                    prop_assert!((b.components.treated - a.components.treated - shift).abs() <= 1e-9 * (1.0 + shift.abs()));
                }
            }
        }

        #[test]
        fn xps_invariant_to_imputation_constants(seed in any::<u64>(), c in proptest::collection::vec(-10.0f64..10.0, 2)) {
            let d = random_dataset(seed, 150, 2, true);
            let base = EstimatorConfig { method: Method::XPs, ..Default::default() };
            let moved = EstimatorConfig { imputation_constants: Some(c), ..base.clone() };
            if let (Ok(a), Ok(b)) = (estimate(&d, &base), estimate(&d, &moved)) {
                prop_assert!((a.tau_hat - b.tau_hat).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn full_data_reduces_to_classical_estimators() {
        let d = random_dataset(42, 200, 0, false);
        let cfg = EstimatorConfig {
            emodel: CovariateSelector::FullyObservedOnly,
            ..Default::default()
        };
        let a = Analysis::new(&d, &cfg).unwrap();
        let y = d.outcome_filled();
        let n = d.n();
        let mean = |arm: bool| {
            let v: Vec<f64> = (0..n)
                .filter(|&i| d.treatment[i] == arm)
                .map(|i| y[i])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let unadj = a.estimate(Method::Unadj).unwrap().tau_hat;
        assert!((unadj - (mean(true) - mean(false))).abs() < 1e-10);

        // Lin's estimator: separate OLS per arm on centred covariates.
        let x = d.covariates.fully_observed();
        let center: Vec<f64> = (0..2)
            .map(|j| x.column(j).iter().sum::<f64>() / n as f64)
            .collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![1.0, x[(i, 0)] - center[0], x[(i, 1)] - center[1]])
            .collect();
        let design = Matrix::from_rows(&rows).unwrap();
        let arm = |a: bool| {
            let w: Vec<f64> = (0..n)
                .map(|i| if d.treatment[i] == a { 1.0 } else { 0.0 })
                .collect();
            crate::linalg::solve_least_squares(&design, &w, &y)
                .unwrap()
                .coefficients[0]
        };
        let xreg = a.estimate(Method::XReg).unwrap().tau_hat;
        assert!((xreg - (arm(true) - arm(false))).abs() < 1e-9);

        // Propensity-weighted difference with a separately fitted logistic.
        let ed = DesignMatrix::with_intercept(x, &labels("x", 2)).unwrap();
        let e = fit_logistic(&ed, &d.treatment_f64(), None)
            .unwrap()
            .fitted_probabilities;
        let (mut n1, mut d1, mut n0, mut d0) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if d.treatment[i] {
                n1 += y[i] / e[i];
                d1 += 1.0 / e[i];
            } else {
                n0 += y[i] / (1.0 - e[i]);
                d0 += 1.0 / (1.0 - e[i]);
            }
        }
        let xps = a.estimate(Method::XPs).unwrap().tau_hat;
        assert!((xps - (n1 / d1 - n0 / d0)).abs() < 1e-10);
    }

    #[test]
    fn affine_remap_leaves_estimates_unchanged() {
        let d = random_dataset(77, 160, 1, true);
        let remapped = Dataset {
            covariates: d
                .covariates
                .map_fully_observed(|r| {
                    vec![2.0 * r[0] - r[1] + 3.0, 0.5 * r[0] + 1.5 * r[1] - 1.0]
                })
                .unwrap(),
            ..d.clone()
        };
        let cfg = EstimatorConfig::default();
        for m in Method::ALL {
            let a = estimate(&d, &cfg.with_method(m)).unwrap();
            let b = estimate(&remapped, &cfg.with_method(m)).unwrap();
            assert!((a.tau_hat - b.tau_hat).abs() < 1e-8, "{m:?}");
            for (p, q) in a.p.fitted.iter().zip(&b.p.fitted) {
                assert!((p - q).abs() < 1e-8);
            }
        }
    }
}
