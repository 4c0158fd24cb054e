use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: invalid JSON: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("{}: unsupported format version {found:?}, expected {expected:?}", path.display())]
    Version { path: PathBuf, found: String, expected: String },

    #[error("subject {subject}: {} holds {found} bytes, expected {expected} ({channels} channels x {samples} samples)", path.display())]
    SignalSize { subject: String, path: PathBuf, found: u64, expected: u64, channels: usize, samples: usize },

    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("{}: invalid manifest: {detail}", path.display())]
    Validation { path: PathBuf, detail: String },

    #[error("no checkpoint for subjects: {}", .0.join(", "))]
    MissingCheckpoints(Vec<String>),

    #[error("subject {subject}: {source}")]
    Subject { subject: String, source: fbssvep_core::Error },

    #[error(transparent)]
    Core(#[from] fbssvep_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
    let path = path.into();
    move |source| Error::Json { path, source }
}

pub(crate) fn subject(id: &str) -> impl FnOnce(fbssvep_core::Error) -> Error + '_ {
    move |source| Error::Subject { subject: id.to_owned(), source }
}
