use thiserror::Error;

use crate::model::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{section}: {message}")]
    Serialize { section: &'static str, message: String },
    #[error("parse error at byte {offset}: {kind}")]
    Parse { offset: u64, kind: ParseErrorKind },
    #[error("model failed validation ({} diagnostics); first: {}", .0.len(), .0.first().map(|d| d.to_string()).unwrap_or_default())]
    Validation(Vec<Diagnostic>),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("pose is not finite")]
    NonFinitePose,
    #[error("fit diverged for part {part}")]
    Divergence { part: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported endianness flag {0}")]
    BadEndianness(u8),
    #[error("checksum mismatch in section {0}")]
    Checksum(u16),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("duplicate section {0}")]
    DuplicateSection(u16),
    #[error("missing section {0}")]
    MissingSection(u16),
    #[error("unknown section {0}")]
    UnknownSection(u16),
    #[error("invalid value in {section}: {detail}")]
    Invalid { section: &'static str, detail: String },
}
