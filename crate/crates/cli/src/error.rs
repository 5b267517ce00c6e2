use std::fmt;

use bridge_spatial::Error as CoreError;

/// Failure of a command, tagged with the stage that raised it.
#[derive(Debug)]
pub struct CliError {
    pub context: String,
    pub kind: Kind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Validation,
    Numerical,
}

impl CliError {
    pub fn validation(context: &str, message: impl Into<String>) -> Self {
        CliError { context: context.into(), kind: Kind::Validation, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Validation => 2,
            Kind::Numerical => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.context, self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attach a stage name to core, io and serialization errors.
pub trait Context<T> {
    fn context(self, stage: &str) -> CliResult<T>;
}

impl<T> Context<T> for std::result::Result<T, CoreError> {
    fn context(self, stage: &str) -> CliResult<T> {
        self.map_err(|e| CliError {
            context: stage.into(),
            kind: if e.is_validation() { Kind::Validation } else { Kind::Numerical },
            message: e.to_string(),
        })
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn context(self, stage: &str) -> CliResult<T> {
        self.map_err(|e| CliError::validation(stage, e.to_string()))
    }
}

impl<T> Context<T> for serde_json::Result<T> {
    fn context(self, stage: &str) -> CliResult<T> {
        self.map_err(|e| CliError::validation(stage, e.to_string()))
    }
}

impl<T> Context<T> for csv::Result<T> {
    fn context(self, stage: &str) -> CliResult<T> {
        self.map_err(|e| CliError::validation(stage, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let numerical: std::result::Result<(), CoreError> = Err(CoreError::numerical("not finite"));
        assert_eq!(numerical.context("fit").unwrap_err().exit_code(), 3);
        let invalid: std::result::Result<(), CoreError> = Err(CoreError::invalid("bad"));
        let e = invalid.context("fit").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().starts_with("fit: "));
    }
}
