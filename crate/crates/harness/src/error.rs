use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] dua_core::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use dua_core::Error as E;
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(E::Parameter(_)) => 2,
            HarnessError::Io { .. } | HarnessError::Csv(_) => 3,
            HarnessError::Core(E::Io(_)) | HarnessError::Core(E::Format { .. }) => 3,
            HarnessError::Core(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Config(msg.into()))
}
