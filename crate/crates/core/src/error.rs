use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rates: {0}")]
    InvalidRates(String),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("explosion guard tripped after {events} events before t = {t}")]
    Explosion { events: u64, t: f64 },
    #[error("trajectory left the sampled spatial span [{lo}, {hi}]")]
    SpanExceeded { lo: i64, hi: i64 },
    #[error("truncation too small: {0}")]
    Truncation(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("precision loss past degree {safe_cap}: {message}")]
    Precision { message: String, safe_cap: usize },
    #[error("expansion not decayed by cap {cap}; last coefficient {last:e}")]
    TruncationInsufficient { cap: usize, last: f64 },
    #[error("contour error: {0}")]
    Contour(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("singular evaluation point: {0}")]
    Singular(String),
    #[error("oracle state space too large: {states} states (limit {limit})")]
    OracleTooLarge { states: usize, limit: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
