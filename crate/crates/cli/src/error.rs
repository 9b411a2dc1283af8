use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("acceptance mismatch: {0}")]
    Mismatch(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] dbc::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 acceptance mismatch, 3 divergence, 4 configuration, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Mismatch(_) => 2,
            Self::Divergence(_) => 3,
            Self::Config(_) => 4,
            Self::Core(e) => match e {
                dbc::Error::Config(_)
                | dbc::Error::Domain { .. }
                | dbc::Error::Interval { .. }
                | dbc::Error::Shape(_)
                | dbc::Error::Json(_) => 4,
                _ => 1,
            },
            Self::Json(_) => 4,
            Self::Io(_) | Self::Csv(_) => 1,
        }
    }
}
