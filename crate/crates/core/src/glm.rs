//! Logistic regression by iteratively reweighted least squares, and weighted
//! least squares for the outcome regressions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, inf_norm, Matrix};

/// Default lower/upper clip applied to fitted probabilities.
pub const PROBABILITY_CLIP: f64 = 1e-6;

/// A design matrix together with its column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    matrix: Matrix,
    labels: Vec<String>,
}

impl DesignMatrix {
    pub fn new(matrix: Matrix, labels: Vec<String>) -> Result<Self> {
        if labels.len() != matrix.cols() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} columns",
                labels.len(),
                matrix.cols()
            )));
        }
        Ok(Self { matrix, labels })
    }

    /// Prepends a column of ones labelled `(intercept)`.
    pub fn with_intercept(covariates: &Matrix, labels: &[String]) -> Result<Self> {
        let ones = Matrix::from_raw(covariates.rows(), 1, vec![1.0; covariates.rows()]);
        let matrix = Matrix::hstack(&[&ones, covariates])?;
        let mut all = vec!["(intercept)".to_string()];
        all.extend_from_slice(labels);
        Self::new(matrix, all)
    }

    pub fn intercept_only(n: usize) -> Self {
        Self {
            matrix: Matrix::from_raw(n, 1, vec![1.0; n]),
            labels: vec!["(intercept)".into()],
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn nrows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            matrix: self.matrix.select_rows(idx),
            labels: self.labels.clone(),
        }
    }

    pub fn select_columns(&self, idx: &[usize]) -> Self {
        Self {
            matrix: self.matrix.select_columns(idx),
            labels: idx.iter().map(|&j| self.labels[j].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    pub max_iter: usize,
    /// Convergence requires `max |Δβ| ≤ coef_tol · max(1, ‖β‖∞)`.
    pub coef_tol: f64,
    /// ... and a score ∞-norm at most `score_tol · Σ prior weights`.
    pub score_tol: f64,
    pub max_halvings: usize,
    pub separation_bound: f64,
    pub clip: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            coef_tol: 1e-10,
            score_tol: 1e-8,
            max_halvings: 10,
            separation_bound: 30.0,
            clip: PROBABILITY_CLIP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    /// One entry per design column; dropped columns are zero.
    pub coefficients: Vec<f64>,
    /// Clipped to `[clip, 1 − clip]`.
    pub fitted_probabilities: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub dropped_columns: Vec<usize>,
    pub labels: Vec<String>,
    /// Log-likelihood at the start and after every accepted step.
    pub log_likelihood_trace: Vec<f64>,
    pub clip: f64,
}

impl GlmFit {
    pub fn retained_columns(&self) -> Vec<usize> {
        (0..self.coefficients.len())
            .filter(|j| !self.dropped_columns.contains(j))
            .collect()
    }

    pub fn log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().unwrap_or(&f64::NAN)
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn clip_probability(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// `log(1 + e^t)` without overflow.
fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn log_likelihood(x: &Matrix, y: &[f64], w: &[f64], beta: &[f64]) -> f64 {
    (0..x.rows())
        .map(|i| {
            let eta = dot(x.row(i), beta);
            w[i] * (y[i] * eta - log1p_exp(eta))
        })
        .sum()
}

pub fn fit_logistic(x: &DesignMatrix, y: &[f64], prior_weights: Option<&[f64]>) -> Result<GlmFit> {
    fit_logistic_with(x, y, prior_weights, &LogisticOptions::default())
}

/// Maximum-likelihood logistic regression by IRLS with step-halving.
///
/// Collinear columns (judged on the prior-weighted Gram matrix) are dropped
/// before iterating and reported in `dropped_columns`.
pub fn fit_logistic_with(
    x: &DesignMatrix,
    y: &[f64],
    prior_weights: Option<&[f64]>,
    opts: &LogisticOptions,
) -> Result<GlmFit> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} design rows, {} responses",
            y.len()
        )));
    }
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::InvalidInput(
            "logistic response must be 0 or 1".into(),
        ));
    }
    let unit;
    let w = match prior_weights {
        Some(w) if w.len() != n => {
            return Err(Error::DimensionMismatch("prior weights length".into()));
        }
        Some(w) => w,
        None => {
            unit = vec![1.0; n];
            &unit
        }
    };
    let (gram, _) = linalg::weighted_gram(x.matrix(), w, y)?;
    let total_weight: f64 = w.iter().sum();
    if total_weight <= 0.0 {
        return Err(Error::DegenerateFit(
            "no rows with positive prior weight".into(),
        ));
    }
    let dropped = linalg::collinear_columns(&gram);
    let kept: Vec<usize> = (0..x.ncols()).filter(|j| !dropped.contains(j)).collect();
    let xk = x.matrix().select_columns(&kept);
    let k = kept.len();

    let mut beta = vec![0.0; k];
    let mut ll = log_likelihood(&xk, y, w, &beta);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut last_step = f64::INFINITY;
    let mut iterations = 0;

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let mut score = vec![0.0; k];
        let mut iw = vec![0.0; n];
        for i in 0..n {
            let p = sigmoid(dot(xk.row(i), &beta));
            let r = w[i] * (y[i] - p);
            for (s, xv) in score.iter_mut().zip(xk.row(i)) {
                *s += r * xv;
            }
            iw[i] = w[i] * p * (1.0 - p);
        }
        let beta_scale = inf_norm(&beta).max(1.0);
        if last_step <= opts.coef_tol * beta_scale
            && inf_norm(&score) <= opts.score_tol * total_weight
        {
            converged = true;
            iterations = iter - 1;
            break;
        }
        let (info, _) = linalg::weighted_gram(&xk, &iw, y)?;
        let delta = match linalg::solve_spd(&info, &score) {
            Ok(d) => d,
            Err(_) => {
                // Information collapses when fitted probabilities saturate.
                return Err(Error::Separation {
                    max_abs_coefficient: inf_norm(&beta),
                    iteration: iter,
                });
            }
        };
        let mut step = 1.0;
        let mut accepted = None;
        // Near the optimum the gain of a Newton step drops below the rounding
        // error of the summed log-likelihood; such steps still count as ascent.
        let ll_noise = 64.0 * f64::EPSILON * (1.0 + ll.abs());
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = beta.iter().zip(&delta).map(|(b, d)| b + step * d).collect();
            let cand_ll = log_likelihood(&xk, y, w, &cand);
            if cand_ll >= ll - ll_noise {
                accepted = Some((cand, cand_ll));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, cand_ll)) => {
                last_step = step * inf_norm(&delta);
                beta = cand;
                ll = cand_ll;
                trace.push(ll);
            }
            None => {
                // No ascent direction left at floating-point resolution.
                last_step = 0.0;
            }
        }
        let max_abs = inf_norm(&beta);
        if max_abs > opts.separation_bound {
            return Err(Error::Separation {
                max_abs_coefficient: max_abs,
                iteration: iter,
            });
        }
    }
    if !converged {
        return Err(Error::NonConvergence { iterations });
    }

    let mut coefficients = vec![0.0; x.ncols()];
    for (c, &j) in kept.iter().enumerate() {
        coefficients[j] = beta[c];
    }
    let fitted_probabilities = (0..n)
        .map(|i| clip_probability(sigmoid(dot(xk.row(i), &beta)), opts.clip))
        .collect();
    Ok(GlmFit {
        coefficients,
        fitted_probabilities,
        converged,
        iterations,
        dropped_columns: dropped,
        labels: x.labels().to_vec(),
        log_likelihood_trace: trace,
        clip: opts.clip,
    })
}

/// Clipped fitted probabilities for a new design with the same columns.
pub fn predict_prob(fit: &GlmFit, x: &DesignMatrix) -> Result<Vec<f64>> {
    if x.labels() != fit.labels.as_slice() {
        return Err(Error::LabelMismatch(format!(
            "expected {:?}, got {:?}",
            fit.labels,
            x.labels()
        )));
    }
    Ok((0..x.nrows())
        .map(|i| clip_probability(sigmoid(dot(x.matrix().row(i), &fit.coefficients)), fit.clip))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsFit {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub weights_used: Vec<f64>,
    pub design_labels: Vec<String>,
    pub dropped_columns: Vec<usize>,
}

impl WlsFit {
    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.design_labels
            .iter()
            .position(|l| l == label)
            .map(|j| self.coefficients[j])
    }
}

pub fn fit_wls(x: &DesignMatrix, y: &[f64], weights: &[f64]) -> Result<WlsFit> {
    let ls = linalg::solve_least_squares(x.matrix(), weights, y)?;
    let residuals = (0..x.nrows())
        .map(|i| y[i] - dot(x.matrix().row(i), &ls.coefficients))
        .collect();
    Ok(WlsFit {
        coefficients: ls.coefficients,
        residuals,
        weights_used: weights.to_vec(),
        design_labels: x.labels().to_vec(),
        dropped_columns: ls.dropped,
    })
}
