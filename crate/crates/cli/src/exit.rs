use std::fmt;

/// A failure carrying the process exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1.
    Config(String),
    /// Exit 2: an upstream stage has not produced its artifacts.
    MissingUpstream { stage: String, detail: String },
    /// Exit 3.
    Internal(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::MissingUpstream { .. } => 2,
            Failure::Internal(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "invalid configuration: {m}"),
            Failure::MissingUpstream { stage, detail } => {
                write!(f, "missing upstream stage `{stage}`: {detail}; run `tastetrace run {stage}` first")
            }
            Failure::Internal(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Internal(e.into())
    }
}

pub fn config_error(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}
