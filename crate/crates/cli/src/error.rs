use std::fmt;

use serde_json::json;

/// Process exit codes, one per error category.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    /// Unknown flag or malformed command line (clap's own code).
    pub const USAGE: i32 = 2;
    pub const INVALID_CONFIG: i32 = 3;
    pub const MISSING_FILE: i32 = 4;
    pub const MALFORMED: i32 = 5;
    pub const NUMERICAL: i32 = 6;
    pub const MISMATCH: i32 = 7;
}

#[derive(Debug)]
pub enum CliError {
    Core(magicmix_core::Error),
    /// A replay produced different bytes.
    Mismatch(String),
    /// A numerical check exceeded its bound.
    Numerical(String),
}

impl From<magicmix_core::Error> for CliError {
    fn from(e: magicmix_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Mismatch(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn category(&self) -> &'static str {
        use magicmix_core::Error as E;
        match self {
            CliError::Mismatch(_) => "reproducibility_mismatch",
            CliError::Numerical(_) => "numerical",
            CliError::Core(e) => match e {
                E::InvalidConfig(_) | E::ShapeMismatch { .. } | E::UnknownWord(_) | E::InvalidPrompt(_) => {
                    "invalid_config"
                }
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing_file",
                E::Io { .. } => "io",
                E::Malformed { .. } | E::Json(_) => "malformed_input",
                E::NonFinite(_) => "numerical",
                _ => "internal",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "invalid_config" => exit::INVALID_CONFIG,
            "missing_file" => exit::MISSING_FILE,
            "malformed_input" => exit::MALFORMED,
            "numerical" => exit::NUMERICAL,
            "reproducibility_mismatch" => exit::MISMATCH,
            _ => exit::OTHER,
        }
    }

    /// The single-line JSON written to stderr.
    pub fn to_json(&self) -> String {
        json!({
            "error": {
                "category": self.category(),
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        })
        .to_string()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
