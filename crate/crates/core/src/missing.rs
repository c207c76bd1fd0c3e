//! Missingness-indicator preprocessing: impute partially observed covariates
//! with constants and append observation indicators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Fully observed covariates `x` (n×J) together with partially observed
/// covariates `w` (n×K). A cell of `w` is usable only when its mask entry is
/// set; the value slot of a missing cell is never read.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialCovariates {
    fully_observed: Matrix,
    fully_observed_labels: Vec<String>,
    partial_values: Vec<f64>,
    observed: Vec<bool>,
    partial_labels: Vec<String>,
}

impl PartialCovariates {
    pub fn new(
        fully_observed: Matrix,
        fully_observed_labels: Vec<String>,
        partial: Vec<Vec<Option<f64>>>,
        partial_labels: Vec<String>,
    ) -> Result<Self> {
        let n = fully_observed.rows();
        if fully_observed_labels.len() != fully_observed.cols() {
            return Err(Error::DimensionMismatch("fully observed labels".into()));
        }
        if partial.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} rows of fully observed covariates, {} rows of partial covariates",
                partial.len()
            )));
        }
        let k = partial_labels.len();
        let mut partial_values = Vec::with_capacity(n * k);
        let mut observed = Vec::with_capacity(n * k);
        for row in &partial {
            if row.len() != k {
                return Err(Error::DimensionMismatch(
                    "ragged partial covariate rows".into(),
                ));
            }
            for cell in row {
                match cell {
                    Some(v) if !v.is_finite() => {
                        return Err(Error::NonFinite("partial covariates"))
                    }
                    Some(v) => {
                        partial_values.push(*v);
                        observed.push(true);
                    }
                    None => {
                        partial_values.push(0.0);
                        observed.push(false);
                    }
                }
            }
        }
        Ok(Self {
            fully_observed,
            fully_observed_labels,
            partial_values,
            observed,
            partial_labels,
        })
    }

    /// Covariates with nothing missing.
    pub fn fully_observed_only(x: Matrix, labels: Vec<String>) -> Result<Self> {
        let n = x.rows();
        Self::new(x, labels, vec![Vec::new(); n], Vec::new())
    }

    pub fn n(&self) -> usize {
        self.fully_observed.rows()
    }

    pub fn num_fully_observed(&self) -> usize {
        self.fully_observed.cols()
    }

    pub fn num_partial(&self) -> usize {
        self.partial_labels.len()
    }

    pub fn fully_observed(&self) -> &Matrix {
        &self.fully_observed
    }

    pub fn fully_observed_labels(&self) -> &[String] {
        &self.fully_observed_labels
    }

    pub fn partial_labels(&self) -> &[String] {
        &self.partial_labels
    }

    pub fn partial(&self, i: usize, k: usize) -> Option<f64> {
        let idx = i * self.num_partial() + k;
        self.observed[idx].then(|| self.partial_values[idx])
    }

    pub fn is_observed(&self, i: usize, k: usize) -> bool {
        self.observed[i * self.num_partial() + k]
    }

    pub fn partial_row(&self, i: usize) -> Vec<Option<f64>> {
        (0..self.num_partial())
            .map(|k| self.partial(i, k))
            .collect()
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let k = self.num_partial();
        let mut partial_values = Vec::with_capacity(idx.len() * k);
        let mut observed = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            partial_values.extend_from_slice(&self.partial_values[i * k..(i + 1) * k]);
            observed.extend_from_slice(&self.observed[i * k..(i + 1) * k]);
        }
        Self {
            fully_observed: self.fully_observed.select_rows(idx),
            fully_observed_labels: self.fully_observed_labels.clone(),
            partial_values,
            observed,
            partial_labels: self.partial_labels.clone(),
        }
    }

    /// Applies `f` to every fully observed row; used for covariate remaps.
    pub fn map_fully_observed(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..self.n())
            .map(|i| f(self.fully_observed.row(i)))
            .collect();
        let cols = rows.first().map_or(self.num_fully_observed(), Vec::len);
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        let mut out = self.clone();
        out.fully_observed = Matrix::new(self.n(), cols, data)?;
        if cols != self.fully_observed_labels.len() {
            out.fully_observed_labels = (0..cols).map(|j| format!("x{}", j + 1)).collect();
        }
        Ok(out)
    }
}

/// `x^mim = (x, w^(c), R^w)` with bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedCovariates {
    pub matrix: Matrix,
    pub labels: Vec<String>,
    pub imputation_constants: Vec<f64>,
    /// Matrix column indices of indicator columns that are constant across
    /// units. They stay in `matrix` but are excluded by `subset_covariates`.
    pub dropped_indicator_columns: Vec<usize>,
    pub num_fully_observed: usize,
    pub num_partial: usize,
}

pub fn indicator_label(label: &str) -> String {
    format!("R_{label}")
}

pub fn augment_mim(pc: &PartialCovariates, c: &[f64]) -> Result<AugmentedCovariates> {
    let (n, j, k) = (pc.n(), pc.num_fully_observed(), pc.num_partial());
    if c.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} imputation constants for {k} partial covariates",
            c.len()
        )));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("imputation constants"));
    }
    let width = j + 2 * k;
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        data.extend_from_slice(pc.fully_observed.row(i));
        for kk in 0..k {
            data.push(pc.partial(i, kk).unwrap_or(c[kk]));
        }
        for kk in 0..k {
            data.push(if pc.is_observed(i, kk) { 1.0 } else { 0.0 });
        }
    }
    let matrix = Matrix::new(n, width, data)?;
    let dropped_indicator_columns = (0..k)
        .filter(|&kk| (1..n).all(|i| pc.is_observed(i, kk) == pc.is_observed(0, kk)))
        .map(|kk| j + k + kk)
        .collect();
    let mut labels = pc.fully_observed_labels.clone();
    labels.extend(pc.partial_labels.iter().cloned());
    labels.extend(pc.partial_labels.iter().map(|l| indicator_label(l)));
    Ok(AugmentedCovariates {
        matrix,
        labels,
        imputation_constants: c.to_vec(),
        dropped_indicator_columns,
        num_fully_observed: j,
        num_partial: k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateSelector {
    /// `x^mim` without constant indicator columns.
    FullMim,
    /// `x` only.
    FullyObservedOnly,
    /// `(x, w^(c))`.
    ImputedOnly,
    /// No covariates.
    Empty,
}

impl CovariateSelector {
    pub const ALL: [CovariateSelector; 4] = [
        CovariateSelector::FullMim,
        CovariateSelector::FullyObservedOnly,
        CovariateSelector::ImputedOnly,
        CovariateSelector::Empty,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            CovariateSelector::FullMim => "full-mim",
            CovariateSelector::FullyObservedOnly => "fully-observed-only",
            CovariateSelector::ImputedOnly => "imputed-only",
            CovariateSelector::Empty => "empty",
        }
    }
}

impl AugmentedCovariates {
    pub fn selected_columns(&self, selector: CovariateSelector) -> Vec<usize> {
        let (j, k) = (self.num_fully_observed, self.num_partial);
        match selector {
            CovariateSelector::FullMim => (0..j + 2 * k)
                .filter(|c| !self.dropped_indicator_columns.contains(c))
                .collect(),
            CovariateSelector::FullyObservedOnly => (0..j).collect(),
            CovariateSelector::ImputedOnly => (0..j + k).collect(),
            CovariateSelector::Empty => Vec::new(),
        }
    }
}

/// Columns picked by `selector`, with their labels.
pub fn subset_covariates(
    ac: &AugmentedCovariates,
    selector: CovariateSelector,
) -> (Matrix, Vec<String>) {
    let cols = ac.selected_columns(selector);
    let labels = cols.iter().map(|&c| ac.labels[c].clone()).collect();
    (ac.matrix.select_columns(&cols), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::solve_least_squares;
    use proptest::prelude::*;

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn example_unit() -> PartialCovariates {
        PartialCovariates::new(
            Matrix::from_rows(&[vec![2.0]]).unwrap(),
            labels(&["x"]),
            vec![vec![Some(1.5), None]],
            labels(&["w1", "w2"]),
        )
        .unwrap()
    }

    #[test]
    fn zero_imputation_row() {
        let ac = augment_mim(&example_unit(), &[0.0, 0.0]).unwrap();
        assert_eq!(ac.matrix.row(0), &[2.0, 1.5, 0.0, 1.0, 0.0]);
        assert_eq!(ac.labels, labels(&["x", "w1", "w2", "R_w1", "R_w2"]));
    }

    #[test]
    fn constant_imputation_row() {
        let ac = augment_mim(&example_unit(), &[9.0, -4.0]).unwrap();
        assert_eq!(ac.matrix.row(0), &[2.0, 1.5, -4.0, 1.0, 0.0]);
    }

    #[test]
    fn fully_observed_mask_flags_every_indicator() {
        let pc = PartialCovariates::new(
            Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap(),
            labels(&["x"]),
            vec![
                vec![Some(1.0), Some(0.0)],
                vec![Some(2.0), Some(5.0)],
                vec![Some(-1.0), Some(2.0)],
            ],
            labels(&["a", "b"]),
        )
        .unwrap();
        let ac = augment_mim(&pc, &[0.0, 0.0]).unwrap();
        assert_eq!(ac.dropped_indicator_columns, vec![3, 4]);
        for i in 0..3 {
            assert_eq!(&ac.matrix.row(i)[3..], &[1.0, 1.0]);
        }
    }

    #[test]
    fn selectors_on_example_unit() {
        // A single unit makes every indicator constant, so full-mim drops them.
        let ac = augment_mim(&example_unit(), &[0.0, 0.0]).unwrap();
        let (m, l) = subset_covariates(&ac, CovariateSelector::FullMim);
        assert_eq!(m.row(0), &[2.0, 1.5, 0.0]);
        assert_eq!(l, labels(&["x", "w1", "w2"]));
        let (m, _) = subset_covariates(&ac, CovariateSelector::FullyObservedOnly);
        assert_eq!(m.row(0), &[2.0]);
        let (m, _) = subset_covariates(&ac, CovariateSelector::ImputedOnly);
        assert_eq!(m.row(0), &[2.0, 1.5, 0.0]);
        let (m, _) = subset_covariates(&ac, CovariateSelector::Empty);
        assert_eq!((m.rows(), m.cols()), (1, 0));
    }

    #[test]
    fn full_mim_keeps_varying_indicators() {
        let pc = PartialCovariates::new(
            Matrix::from_rows(&[vec![2.0], vec![0.5]]).unwrap(),
            labels(&["x"]),
            vec![vec![Some(1.5), None], vec![Some(0.5), Some(3.0)]],
            labels(&["w1", "w2"]),
        )
        .unwrap();
        let ac = augment_mim(&pc, &[0.0, 0.0]).unwrap();
        assert_eq!(ac.dropped_indicator_columns, vec![3]);
        let (m, l) = subset_covariates(&ac, CovariateSelector::FullMim);
        assert_eq!(l, labels(&["x", "w1", "w2", "R_w2"]));
        assert_eq!(m.row(0), &[2.0, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn covariate_missing_everywhere_imputes_constant() {
        let pc = PartialCovariates::new(
            Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            labels(&["x"]),
            vec![vec![None], vec![None]],
            labels(&["w"]),
        )
        .unwrap();
        let ac = augment_mim(&pc, &[7.0]).unwrap();
        assert_eq!(ac.matrix.column(1), vec![7.0, 7.0]);
        assert_eq!(ac.dropped_indicator_columns, vec![2]);
    }

    #[test]
    fn rejects_bad_constants() {
        assert!(augment_mim(&example_unit(), &[0.0]).is_err());
        assert!(augment_mim(&example_unit(), &[0.0, f64::NAN]).is_err());
    }

    fn partial_instance() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<Option<f64>>>)> {
        (6usize..30, 1usize..4).prop_flat_map(|(n, k)| {
            (
                proptest::collection::vec(-3.0f64..3.0, n),
                proptest::collection::vec(
                    proptest::collection::vec(proptest::option::weighted(0.7, -5.0f64..5.0), k),
                    n,
                ),
            )
        })
    }

    proptest! {
        #[test]
        fn column_space_invariant_to_constants(
            (x, w) in partial_instance(),
            c in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let k = w[0].len();
            let n = x.len();
            let pc = PartialCovariates::new(
                Matrix::column_vector(&x).unwrap(),
                labels(&["x"]),
                w,
                (0..k).map(|j| format!("w{j}")).collect(),
            ).unwrap();
            // A missing cell holds c instead of 0, so w^(c) = w^0 + c(1 − R):
            // the spans agree once an intercept is present.
            let ones = Matrix::column_vector(&vec![1.0; n]).unwrap();
            let a0 = augment_mim(&pc, &vec![0.0; k]).unwrap();
            let ac = augment_mim(&pc, &c[..k]).unwrap();
            let m0 = Matrix::hstack(&[&ones, &a0.matrix]).unwrap();
            let mc = Matrix::hstack(&[&ones, &ac.matrix]).unwrap();
            for (from, to) in [(&m0, &mc), (&mc, &m0)] {
                for col in 0..to.cols() {
                    let target = to.column(col);
                    let fit = solve_least_squares(from, &vec![1.0; n], &target).unwrap();
                    let fitted = from.matvec(&fit.coefficients).unwrap();
                    let resid: f64 = target.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    prop_assert!(resid <= 1e-8, "column {col} residual {resid}");
                }
            }
        }

        #[test]
        fn observed_cells_round_trip((x, w) in partial_instance()) {
            let k = w[0].len();
            let pc = PartialCovariates::new(
                Matrix::column_vector(&x).unwrap(),
                labels(&["x"]),
                w.clone(),
                (0..k).map(|j| format!("w{j}")).collect(),
            ).unwrap();
            let ac = augment_mim(&pc, &vec![0.0; k]).unwrap();
            for (i, row) in w.iter().enumerate() {
                for (kk, cell) in row.iter().enumerate() {
                    let indicator = ac.matrix[(i, 1 + k + kk)];
                    match cell {
                        Some(v) => {
                            prop_assert_eq!(indicator, 1.0);
                            prop_assert_eq!(ac.matrix[(i, 1 + kk)].to_bits(), v.to_bits());
                        }
                        None => {
                            prop_assert_eq!(indicator, 0.0);
                            prop_assert_eq!(ac.matrix[(i, 1 + kk)], 0.0);
                        }
                    }
                }
            }
        }
    }
}
