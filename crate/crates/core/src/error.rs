use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("environment error: {0}")]
    Environment(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lexicon error: {0}")]
    Lexicon(String),
    #[error("degenerate game: {0}")]
    DegenerateGame(String),
    #[error("data error in record {record}: {msg}")]
    Data { record: usize, msg: String },
    #[error("optimization error: {msg}")]
    Optimization { msg: String, trace: Vec<f64> },
    #[error("sweep error: {0}")]
    Sweep(String),
    #[error("schema error at `{path}`: {msg}")]
    Schema { path: String, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Environment(_) => "environment",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Lexicon(_) => "lexicon",
            Error::DegenerateGame(_) => "degenerate_game",
            Error::Data { .. } => "data",
            Error::Optimization { .. } => "optimization",
            Error::Sweep(_) => "sweep",
            Error::Schema { .. } => "schema",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
