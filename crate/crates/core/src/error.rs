use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A latent, prediction or loss stopped being finite.
    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("missing attention record for {0}")]
    MissingRecord(String),

    #[error("unknown parameter or layer: {0}")]
    UnknownLayer(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error("image: {0}")]
    Image(String),

    #[error("{phase}: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn non_finite(location: impl Into<String>) -> Self {
        Error::NonFinite {
            location: location.into(),
        }
    }

    /// Attach the pipeline phase that produced this error.
    pub fn in_phase(self, phase: &'static str) -> Self {
        match self {
            e @ Error::Phase { .. } => e,
            e => Error::Phase {
                phase,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping phase tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self.root(), Error::NonFinite { .. })
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
