use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] sanity_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn from_clap(e: &clap::Error) -> Self {
        let text = e.render().to_string();
        let text = text.strip_prefix("error: ").unwrap_or(&text);
        CliError::Usage(text.trim_end().to_string())
    }

    pub fn exit_code(&self) -> u8 {
        use sanity_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::InvalidConfig(_) | E::InvalidArgument(_)) => 1,
            _ => 2,
        }
    }
}
