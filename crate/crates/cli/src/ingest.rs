//! CSV input and output for datasets.

use std::fs::File;
use std::io::{Read, Write};

use covadj::linalg::Matrix;
use covadj::{Dataset, PartialCovariates};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const EXPORT_MISSING_TOKEN: &str = "NA";

pub fn ingest_csv(config: &RunConfig) -> CliResult<Dataset> {
    let file = File::open(&config.input)?;
    ingest_reader(file, config)
}

pub fn ingest_reader<R: Read>(reader: R, config: &RunConfig) -> CliResult<Dataset> {
    config.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str, role: &str| -> CliResult<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::Schema {
                row: None,
                column: Some(name.to_string()),
                message: format!("{role} column not found in header"),
            })
    };
    let y_col = column(&config.outcome, "outcome")?;
    let z_col = column(&config.treatment, "treatment")?;
    let x_cols = config
        .covariates
        .iter()
        .map(|c| column(c, "covariate"))
        .collect::<CliResult<Vec<_>>>()?;
    let w_cols = config
        .partial_covariates
        .iter()
        .map(|c| column(c, "partial covariate"))
        .collect::<CliResult<Vec<_>>>()?;

    let mut outcome = Vec::new();
    let mut treatment = Vec::new();
    let mut x_data = Vec::new();
    let mut partial = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |col: usize| record.get(col).unwrap_or("");
        let number = |col: usize| -> CliResult<Option<f64>> {
            let raw = cell(col);
            if config.is_missing(raw) {
                return Ok(None);
            }
            match raw.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(CliError::Parse {
                    row,
                    column: headers[col].to_string(),
                    message: format!("`{raw}` is not a finite number"),
                }),
            }
        };
        let required = |col: usize, role: &str| -> CliResult<f64> {
            number(col)?.ok_or_else(|| CliError::Schema {
                row: Some(row),
                column: Some(headers[col].to_string()),
                message: format!("missing value in {role}"),
            })
        };
        outcome.push(number(y_col)?);
        let z = required(z_col, "treatment")?;
        if z != 0.0 && z != 1.0 {
            return Err(CliError::Schema {
                row: Some(row),
                column: Some(headers[z_col].to_string()),
                message: format!("treatment must be 0 or 1, found `{}`", cell(z_col).trim()),
            });
        }
        treatment.push(z == 1.0);
        for &c in &x_cols {
            x_data.push(required(c, "fully observed covariate")?);
        }
        partial.push(
            w_cols
                .iter()
                .map(|&c| number(c))
                .collect::<CliResult<Vec<_>>>()?,
        );
    }
    let n = outcome.len();
    if n == 0 {
        return Err(CliError::schema("no data rows"));
    }
    let x = Matrix::new(n, x_cols.len(), x_data)?;
    let pc = PartialCovariates::new(
        x,
        config.covariates.clone(),
        partial,
        config.partial_covariates.clone(),
    )?;

    let n_obs = outcome.iter().filter(|y| y.is_some()).count();
    log::info!(
        "read {n} rows; outcome missing rate {:.4}",
        1.0 - n_obs as f64 / n as f64
    );
    for (k, label) in config.partial_covariates.iter().enumerate() {
        let missing = (0..n).filter(|&i| !pc.is_observed(i, k)).count();
        log::info!(
            "covariate `{label}` missing rate {:.4}",
            missing as f64 / n as f64
        );
    }
    Ok(Dataset::new(pc, treatment, outcome)?)
}

/// Writes `dataset` with columns `outcome, treatment, covariates…, partial
/// covariates…`; missing cells are written as `NA`. Numbers use the shortest
/// representation that parses back to the same value.
pub fn export_csv<W: Write>(
    dataset: &Dataset,
    outcome: &str,
    treatment: &str,
    out: W,
) -> CliResult<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let pc = &dataset.covariates;
    let mut header = vec![outcome.to_string(), treatment.to_string()];
    header.extend(pc.fully_observed_labels().iter().cloned());
    header.extend(pc.partial_labels().iter().cloned());
    wtr.write_record(&header)?;
    let fmt =
        |v: Option<f64>| v.map_or_else(|| EXPORT_MISSING_TOKEN.to_string(), |x| format!("{x:?}"));
    for i in 0..dataset.n() {
        let mut row = vec![
            fmt(dataset.outcome[i]),
            if dataset.treatment[i] { "1" } else { "0" }.to_string(),
        ];
        row.extend(pc.fully_observed().row(i).iter().map(|&v| fmt(Some(v))));
        row.extend(pc.partial_row(i).into_iter().map(fmt));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
