use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A configuration value out of range; `key` names the setting.
    #[error("invalid setting `{key}`: {message}")]
    Config { key: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}

pub(crate) fn config<T>(key: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config { key: key.to_string(), message: msg.into() })
}
