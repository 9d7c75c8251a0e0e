use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("unknown view id {0}")]
    UnknownView(usize),
}
