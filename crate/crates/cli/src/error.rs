use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// `row` is 1-based over data rows (the header is row 0).
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error{}: {message}", location(.row, .column))]
    Schema {
        row: Option<usize>,
        column: Option<String>,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Estimation(#[from] covadj::Error),
}

fn location(row: &Option<usize>, column: &Option<String>) -> String {
    match (row, column) {
        (Some(r), Some(c)) => format!(" at row {r}, column `{c}`"),
        (None, Some(c)) => format!(" in column `{c}`"),
        (Some(r), None) => format!(" at row {r}"),
        (None, None) => String::new(),
    }
}

impl CliError {
    pub fn schema(message: impl Into<String>) -> Self {
        CliError::Schema {
            row: None,
            column: None,
            message: message.into(),
        }
    }

    /// 2 for configuration, input and I/O problems; 3 when estimation fails.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Estimation(_) => 3,
            _ => 2,
        }
    }
}
