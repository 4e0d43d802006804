use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),

    #[error("invariant check failed: {0}")]
    Invariant(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: sdmd::Error,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl LabError {
    /// Process exit status: 2 invariant, 3 numerical, 4 config, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Invariant(_) => 2,
            LabError::Config(_) => 4,
            LabError::Stage { source, .. } => match source.root() {
                e if e.is_numerical() => 3,
                sdmd::Error::InvalidConfig(_)
                | sdmd::Error::InvalidArgument(_)
                | sdmd::Error::DimensionMismatch { .. }
                | sdmd::Error::UnsupportedFamily(_) => 4,
                _ => 1,
            },
            LabError::Io { .. } | LabError::Other(_) => 1,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Attaches a pipeline stage name to library errors.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for sdmd::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| LabError::Stage { stage, source })
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
