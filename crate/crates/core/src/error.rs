use thiserror::Error;

/// Errors raised by the key table and the authentication cipher.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("slot index {0} is outside the key table")]
    IndexOutOfRange(usize),
    #[error("key table must hold exactly 2000 values, got {0}")]
    TableLength(usize),
    #[error("invalid protocol parameters: {0}")]
    Params(String),
    #[error("challenge does not fit the protocol parameters: {0}")]
    ChallengeShape(String),
}
