use std::path::Path;

use veil::VeilError;

/// A failure reported as one `error[class]: message` line.
#[derive(Debug)]
pub struct CliError {
    pub class: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            class: "config",
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            class: "usage",
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            class: "io",
            message: format!("{}: {e}", path.display()),
        }
    }

    /// Exit status: 2 for usage and configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.class {
            "usage" | "config" => 2,
            _ => 1,
        }
    }
}

impl From<VeilError> for CliError {
    fn from(e: VeilError) -> Self {
        CliError {
            class: e.class(),
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // keep the report on one line whatever the message contains
        let one_line: String = self
            .message
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        write!(f, "error[{}]: {one_line}", self.class)
    }
}
