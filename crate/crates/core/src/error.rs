use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("internal consistency: {0}")]
    InternalConsistency(String),

    /// Input lies outside the region where a closed-form model is defined.
    #[error("outside model domain: {0}")]
    Domain(String),

    #[error("low-confidence phase estimate: reference power is {ratio:.3}x the noise floor")]
    LowConfidence { ratio: f64 },

    #[error("efficiency undefined: ASE variance {0} does not exceed the vacuum level")]
    UndefinedEfficiency(f64),

    #[error("no gain: ASE variance {0} is below the vacuum level")]
    NoGain(f64),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("shot pairing failed: {0}")]
    Pairing(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("unsupported record dump version {found} (this build reads version {expected}); re-run `simulate` to regenerate the dump")]
    VersionMismatch { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
