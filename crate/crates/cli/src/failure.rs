use std::fmt;

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, environment values or config syntax: exit 1.
    Usage(String),
    /// Inputs that violate a contract, incompatible files, IO: exit 2.
    Contract(String),
    /// NaN/Inf during computation or a failed gradient check: exit 3.
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Contract(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Contract(m) => write!(f, "{m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<paraformer::Error> for Failure {
    fn from(e: paraformer::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Contract(e.to_string())
        }
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn contract(msg: impl Into<String>) -> Failure {
    Failure::Contract(msg.into())
}

pub type CmdResult<T = ()> = Result<T, Failure>;
