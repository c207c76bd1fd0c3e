use std::path::PathBuf;

use covadj::variance::VarianceMethod;
use covadj::{CovariateSelector, EstimatorConfig, Method, PModelDesign};

use crate::error::{CliError, CliResult};

pub const DEFAULT_MISSING_TOKENS: [&str; 2] = ["", "NA"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: PathBuf,
    pub outcome: String,
    pub treatment: String,
    /// Covariates that must be observed for every unit.
    pub covariates: Vec<String>,
    /// Covariates that may contain missing tokens.
    pub partial_covariates: Vec<String>,
    /// Compared case-insensitively after trimming.
    pub missing_tokens: Vec<String>,
    pub methods: Vec<Method>,
    /// Outcome-missingness model; defaults to covariates, Z and their interaction.
    pub pmodel: PModelDesign,
    /// Covariates in the treatment-propensity model.
    pub emodel: CovariateSelector,
    pub variance: Vec<VarianceMethod>,
    pub bootstrap_reps: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>, outcome: &str, treatment: &str) -> Self {
        Self {
            input: input.into(),
            outcome: outcome.to_string(),
            treatment: treatment.to_string(),
            covariates: Vec::new(),
            partial_covariates: Vec::new(),
            missing_tokens: DEFAULT_MISSING_TOKENS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            methods: Method::ALL.to_vec(),
            pmodel: PModelDesign::default(),
            emodel: CovariateSelector::FullMim,
            variance: vec![VarianceMethod::Sandwich],
            bootstrap_reps: 500,
            seed: 0,
            output: None,
        }
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            pmodel: self.pmodel,
            emodel: self.emodel,
            ..Default::default()
        }
    }

    pub fn is_missing(&self, cell: &str) -> bool {
        let cell = cell.trim();
        self.missing_tokens
            .iter()
            .any(|t| t.trim().eq_ignore_ascii_case(cell))
    }

    /// Every column name used, with its role.
    pub fn roles(&self) -> Vec<(&str, &'static str)> {
        let mut out = vec![
            (self.outcome.as_str(), "outcome"),
            (self.treatment.as_str(), "treatment"),
        ];
        out.extend(self.covariates.iter().map(|c| (c.as_str(), "covariate")));
        out.extend(
            self.partial_covariates
                .iter()
                .map(|c| (c.as_str(), "partial covariate")),
        );
        out
    }

    pub fn validate(&self) -> CliResult<()> {
        let roles = self.roles();
        for (i, (name, role)) in roles.iter().enumerate() {
            if let Some((_, other)) = roles[..i].iter().find(|(n, _)| n == name) {
                return Err(CliError::Config(format!(
                    "column `{name}` is used both as {other} and as {role}"
                )));
            }
        }
        if self.methods.is_empty() {
            return Err(CliError::Config("no estimators requested".into()));
        }
        if self.variance.contains(&VarianceMethod::Bootstrap) && self.bootstrap_reps < 2 {
            return Err(CliError::Config(
                "bootstrap needs at least 2 replicates".into(),
            ));
        }
        Ok(())
    }
}

pub fn parse_methods(list: &str) -> CliResult<Vec<Method>> {
    split_list(list)
        .map(|s| {
            Method::parse(s).ok_or_else(|| {
                CliError::Config(format!(
                    "unknown estimator `{s}` (expected unadj, x-reg, x-ps, dr)"
                ))
            })
        })
        .collect()
}

pub fn parse_variance(list: &str) -> CliResult<Vec<VarianceMethod>> {
    split_list(list)
        .map(|s| {
            VarianceMethod::parse(s).ok_or_else(|| {
                CliError::Config(format!(
                    "unknown variance method `{s}` (expected sandwich, bootstrap)"
                ))
            })
        })
        .collect()
}

pub fn parse_selector(s: &str) -> CliResult<CovariateSelector> {
    CovariateSelector::parse(s.trim()).ok_or_else(|| {
        let names: Vec<&str> = CovariateSelector::ALL.iter().map(|c| c.name()).collect();
        CliError::Config(format!(
            "unknown covariate set `{s}` (expected {})",
            names.join(", ")
        ))
    })
}

/// `interacted` (Z and covariate-by-Z terms), `additive` (Z only) or
/// `covariates` (no treatment terms).
pub fn parse_pmodel(terms: &str, covariates: &str) -> CliResult<PModelDesign> {
    let covariates = parse_selector(covariates)?;
    let (treatment, interaction) = match terms.trim() {
        "interacted" => (true, true),
        "additive" => (true, false),
        "covariates" => (false, false),
        other => {
            return Err(CliError::Config(format!(
                "unknown p-model terms `{other}` (expected interacted, additive, covariates)"
            )))
        }
    };
    Ok(PModelDesign {
        covariates,
        treatment,
        interaction,
    })
}

pub fn split_list(list: &str) -> impl Iterator<Item = &str> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_tokens_trim_and_ignore_case() {
        let cfg = RunConfig::new("x.csv", "y", "z");
        assert!(cfg.is_missing(""));
        assert!(cfg.is_missing("  na "));
        assert!(cfg.is_missing("NA"));
        assert!(!cfg.is_missing("."));
        assert!(!cfg.is_missing("0"));
    }

    #[test]
    fn duplicate_roles_rejected() {
        let mut cfg = RunConfig::new("x.csv", "y", "z");
        cfg.covariates = vec!["a".into()];
        cfg.partial_covariates = vec!["a".into()];
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn method_lists() {
        assert_eq!(
            parse_methods("unadj, dr").unwrap(),
            vec![Method::Unadj, Method::Dr]
        );
        assert!(parse_methods("ols").is_err());
        assert_eq!(
            parse_variance("bootstrap").unwrap(),
            vec![VarianceMethod::Bootstrap]
        );
        assert_eq!(
            parse_pmodel("interacted", "full-mim").unwrap(),
            PModelDesign::default()
        );
        assert_eq!(
            parse_pmodel("covariates", "fully-observed-only").unwrap(),
            PModelDesign::covariates_only(CovariateSelector::FullyObservedOnly)
        );
        assert!(parse_pmodel("quadratic", "full-mim").is_err());
        assert!(parse_selector("all").is_err());
    }
}
