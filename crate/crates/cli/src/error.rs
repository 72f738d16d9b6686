use std::fmt;

use bridge_core::CoreError;
use serde::Serialize;

/// Failure classes and their exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    /// Malformed command line.
    Usage,
    /// Unreadable or invalid configuration.
    Config,
    /// Missing or unreadable checkpoint or input artifact.
    Input,
    /// Failure after inputs were accepted.
    Runtime,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Runtime => 1,
            Kind::Usage | Kind::Config | Kind::Input => 2,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl fmt::Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }

    pub fn config(e: impl fmt::Display) -> Self {
        Self::new(Kind::Config, e)
    }

    pub fn input(e: impl fmt::Display) -> Self {
        Self::new(Kind::Input, e)
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        Self::new(Kind::Runtime, e)
    }

    /// One JSON object on one line.
    pub fn to_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: Kind,
            exit: i32,
            message: &'a str,
        }
        let flat = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        serde_json::to_string(&Line {
            error: self.kind,
            exit: self.kind.exit_code(),
            message: &flat,
        })
        .expect("error line serializes")
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        Self::runtime(e)
    }
}
