use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}`")]
    ParseFailure {
        row: usize,
        column: String,
        value: String,
    },
    #[error("duplicate unit id {0}")]
    DuplicateUnitId(i64),
    #[error("schema validation failed: {0} error(s); first: {1}")]
    SchemaRejected(usize, String),
    #[error("log argument non-positive for `{variable}` at row {row}")]
    NonPositiveLogArgument { variable: String, row: usize },
    #[error("zero variance for `{variable}` in stratum `{stratum}`")]
    ZeroVariance { stratum: String, variable: String },
    #[error("no scaling constants for `{variable}` in stratum `{stratum}`")]
    MissingConstants { stratum: String, variable: String },
    #[error("variable `{0}` not found")]
    MissingVariable(String),
    #[error("index has {have} donors, need at least {need}")]
    TooFewDonors { have: usize, need: usize },
    #[error("query dimension {query} does not match index dimension {index}")]
    DimensionMismatch { query: usize, index: usize },
    #[error("neighbor list length {neighbors} does not match weight count {weights}")]
    LengthMismatch { neighbors: usize, weights: usize },
    #[error("cluster {0} has no units and no out-of-scope slots")]
    EmptyCluster(i64),
    #[error("domain `{domain}` has {n} sampled unit(s), need at least {need}")]
    DomainTooSmall { domain: String, n: usize, need: usize },
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("variance estimation did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("{have} domains with direct estimates, need at least {need}")]
    TooFewDomains { have: usize, need: usize },
    #[error("true mean is zero for domain `{0}`; relative bias undefined")]
    ZeroTruth(String),
    #[error("empirical MSE is zero for estimator `{estimator}` domain `{domain}`")]
    DegenerateMse { estimator: String, domain: String },
    #[error("population carries no donor provenance")]
    ProvenanceMissing,
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}
