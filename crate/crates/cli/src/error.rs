use std::fmt;
use std::path::Path;

use crate::config::ConfigError;

/// A failed command: a stable `kind` for scripts plus a human reason.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub reason: String,
}

impl CliError {
    pub fn new(kind: &'static str, reason: impl Into<String>) -> Self {
        Self { kind, reason: reason.into() }
    }

    /// A required input that could not be read.
    pub fn input(path: impl AsRef<Path>, e: impl fmt::Display) -> Self {
        Self::new("input", format!("{}: {e}", path.as_ref().display()))
    }

    pub fn io(path: impl AsRef<Path>, e: impl fmt::Display) -> Self {
        Self::new("io", format!("{}: {e}", path.as_ref().display()))
    }

    /// `error kind=<kind> reason="<reason>"` on one line.
    pub fn line(&self) -> String {
        let flat = self.reason.replace(['\n', '\r'], "; ").replace('"', "'");
        format!("error kind={} reason=\"{flat}\"", self.kind)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new("config", e.to_string())
    }
}

impl From<stm_core::Error> for CliError {
    fn from(e: stm_core::Error) -> Self {
        use stm_core::Error as E;
        let kind = match &e {
            E::Io(_) | E::Format(stm_core::FormatError::Io(_)) => "io",
            E::Format(_) => "format",
            E::FingerprintMismatch(_) | E::ArchMismatch { .. } => "mismatch",
            E::InvalidArgument(_) | E::InvalidArch(_) => "invalid",
            _ => "runtime",
        };
        Self::new(kind, e.to_string())
    }
}

/// Attaches a path to a library error from loading that path.
pub fn at(path: &Path) -> impl FnOnce(stm_core::Error) -> CliError + '_ {
    move |e| {
        let mut c = CliError::from(e);
        c.reason = format!("{}: {}", path.display(), c.reason);
        if c.kind == "io" {
            c.kind = "input";
        }
        c
    }
}
