use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] metacal::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) | CliError::Core(metacal::Error::Config(_)) => "config",
            CliError::Runtime(_) | CliError::Core(_) => "runtime",
        }
    }

    /// 2 for usage and configuration errors, 1 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "runtime" => 1,
            _ => 2,
        }
    }

    /// One line of JSON for stderr.
    pub fn to_json_line(&self) -> String {
        let message = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        serde_json::json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": message }).to_string()
    }
}
