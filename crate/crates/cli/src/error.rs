use peelsort::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {message}")]
    Input { stage: &'static str, message: String },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Error,
    },
}

impl CliError {
    pub fn input(stage: &'static str, message: impl Into<String>) -> Self {
        CliError::Input {
            stage,
            message: message.into(),
        }
    }

    /// 2 for configuration problems, 3 for unreadable or mismatched inputs,
    /// 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input { .. } => 3,
            CliError::Stage { source, .. } => match source {
                Error::Parameter(_) => 2,
                Error::Io { .. }
                | Error::DimensionMismatch { .. }
                | Error::DataCorruption { .. }
                | Error::Decode { .. }
                | Error::Format { .. }
                | Error::Parse { .. } => 3,
                _ => 4,
            },
        }
    }
}

/// Tags a core error with the pipeline stage that raised it.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> StageExt<T> for peelsort::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
