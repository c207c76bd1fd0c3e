//! Per-unit experimental records.

use crate::error::{Error, Result};
use crate::missing::PartialCovariates;

/// Covariates, treatment, and a possibly missing outcome for each unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub covariates: PartialCovariates,
    pub treatment: Vec<bool>,
    pub outcome: Vec<Option<f64>>,
    /// Optional prior weights for both nuisance logistic fits.
    pub prior_weights: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(
        covariates: PartialCovariates,
        treatment: Vec<bool>,
        outcome: Vec<Option<f64>>,
    ) -> Result<Self> {
        let n = covariates.n();
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} covariate rows, {} treatments, {} outcomes",
                treatment.len(),
                outcome.len()
            )));
        }
        if outcome.iter().flatten().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite("outcome"));
        }
        if n < 2 {
            return Err(Error::InvalidInput(
                "at least two units are required".into(),
            ));
        }
        Ok(Self {
            covariates,
            treatment,
            outcome,
            prior_weights: None,
        })
    }

    pub fn with_prior_weights(mut self, w: Vec<f64>) -> Result<Self> {
        if w.len() != self.n() {
            return Err(Error::DimensionMismatch("prior weights length".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidInput(
                "prior weights must be positive and finite".into(),
            ));
        }
        self.prior_weights = Some(w);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn n_observed(&self) -> usize {
        self.outcome.iter().filter(|y| y.is_some()).count()
    }

    pub fn observed_mask(&self) -> Vec<bool> {
        self.outcome.iter().map(Option::is_some).collect()
    }

    pub fn treatment_f64(&self) -> Vec<f64> {
        self.treatment
            .iter()
            .map(|&z| if z { 1.0 } else { 0.0 })
            .collect()
    }

    /// Outcomes with missing entries set to zero; pair with `observed_mask`.
    pub fn outcome_filled(&self) -> Vec<f64> {
        self.outcome.iter().map(|y| y.unwrap_or(0.0)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            covariates: self.covariates.select_rows(idx),
            treatment: idx.iter().map(|&i| self.treatment[i]).collect(),
            outcome: idx.iter().map(|&i| self.outcome[i]).collect(),
            prior_weights: self
                .prior_weights
                .as_ref()
                .map(|w| idx.iter().map(|&i| w[i]).collect()),
        }
    }
}
