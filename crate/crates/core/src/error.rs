use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric value {value:?} in column `{column}` at data row {row}")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("need at least {needed} rows, found {found}")]
    TooFewRows { needed: usize, found: usize },

    #[error("degenerate exposure range: every exposure equals {0}")]
    DegenerateExposure(f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("learner failure: {0}")]
    Learner(String),

    #[error("function class is empty: kappa = {kappa} is below the smallest attainable roughness {min_ratio}")]
    EmptyClass { kappa: f64, min_ratio: f64 },

    #[error("root bracket failure: ratio spans [{low}, {high}] but target is {target}")]
    Bracket { low: f64, high: f64, target: f64 },

    #[error("TML update did not converge after {steps} steps (last D_n = {last}, threshold = {threshold})")]
    TmlNonConvergence {
        steps: usize,
        last: f64,
        threshold: f64,
        trace: Vec<f64>,
    },

    #[error("TML stopping threshold is degenerate: reference variance is zero")]
    DegenerateThreshold,

    #[error("confidence band is empty at every grid point; increase nu")]
    EmptyBand,

    #[error("degenerate statistic: {0}")]
    Degenerate(String),
}

impl Error {
    /// Errors caused by bad user input rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::MissingColumn(_)
                | Error::NonNumeric { .. }
                | Error::TooFewRows { .. }
                | Error::DegenerateExposure(_)
                | Error::InvalidInput(_)
        )
    }
}
