use std::fmt;

use redact_core::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_PHASE: u8 = 3;

#[derive(Debug)]
pub enum Fail {
    Config(String),
    Phase(String),
}

impl Fail {
    pub fn config(msg: impl Into<String>) -> Self {
        Fail::Config(msg.into())
    }

    pub fn phase(msg: impl Into<String>) -> Self {
        Fail::Phase(msg.into())
    }

    pub fn code(&self) -> u8 {
        match self {
            Fail::Config(_) => EXIT_CONFIG,
            Fail::Phase(_) => EXIT_PHASE,
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fail::Config(m) => write!(f, "config error: {m}"),
            Fail::Phase(m) => write!(f, "phase failed: {m}"),
        }
    }
}

/// Core config errors map to exit code 2 wherever they come from.
fn is_config(e: &Error) -> bool {
    matches!(
        e,
        Error::Config { .. } | Error::Toml(_) | Error::InvalidPlan(_)
    )
}

pub trait ResultExt<T> {
    /// Any error is a config error.
    fn config(self) -> Result<T, Fail>;
    /// Errors are phase failures unless they are config errors.
    fn phase(self) -> Result<T, Fail>;
}

impl<T> ResultExt<T> for redact_core::Result<T> {
    fn config(self) -> Result<T, Fail> {
        self.map_err(|e| Fail::Config(e.to_string()))
    }

    fn phase(self) -> Result<T, Fail> {
        self.map_err(|e| {
            if is_config(&e) {
                Fail::Config(e.to_string())
            } else {
                Fail::Phase(e.to_string())
            }
        })
    }
}
