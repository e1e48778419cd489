use adreason_core::config::ConfigError;
use adreason_core::dataset::DatasetError;
use adreason_core::eval::EvalError;
use adreason_core::grpo::GrpoError;
use adreason_core::retrieval::RetrievalError;
use adreason_core::textgen::TextGenError;
use adreason_core::verify::VerifyError;

/// Failure split by exit code: 1 for bad input, 2 for I/O or endpoint
/// trouble.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Io(m) => m,
        }
    }

    pub fn io(e: impl std::fmt::Display) -> Self {
        CliError::Io(e.to_string())
    }

    pub fn invalid(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::io(e),
            _ => CliError::invalid(e),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Io { .. } => CliError::io(e),
            _ => CliError::invalid(e),
        }
    }
}

impl From<TextGenError> for CliError {
    fn from(e: TextGenError) -> Self {
        match e {
            TextGenError::MissingReference(_) | TextGenError::Decode(_) | TextGenError::Rejected(_) => {
                CliError::invalid(e)
            }
            TextGenError::Dataset(d) => d.into(),
            _ => CliError::io(e),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::ProviderUnavailable(_) => CliError::io(e),
            VerifyError::Dataset(d) => d.into(),
            VerifyError::InvalidConfig(_) => CliError::invalid(e),
        }
    }
}

impl From<GrpoError> for CliError {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::Io { .. } => CliError::io(e),
            _ => CliError::invalid(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CliError::io(e),
            _ => CliError::invalid(e),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::io(e),
            _ => CliError::invalid(e),
        }
    }
}
