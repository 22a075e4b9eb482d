use std::fmt;

use prgp_core::PrgpError;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or flags.
    Config(String),
    /// A stored artifact that cannot be read back.
    Artifact(String),
    Core(PrgpError),
    Io(std::io::Error),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Artifact(_) => "artifact",
            CliError::Core(PrgpError::Schema(_)) => "schema",
            CliError::Core(PrgpError::InputDomain(_)) => "input",
            CliError::Core(PrgpError::EmptyData(_)) => "empty-data",
            CliError::Core(PrgpError::ModelDomain(_)) => "model-domain",
            CliError::Core(PrgpError::IllConditioned { .. }) => "numerics",
            CliError::Core(PrgpError::NonFinite { .. }) => "numerics",
            CliError::Core(PrgpError::RegularizerDegeneracy { .. }) => "regularizer",
            CliError::Core(PrgpError::Calibration { .. }) => "calibration",
            CliError::Core(PrgpError::InternalState(_)) => "internal",
            CliError::Core(PrgpError::Csv(_)) => "csv",
            CliError::Core(PrgpError::Plot(_)) => "plot",
            CliError::Core(PrgpError::Io(_)) | CliError::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Artifact(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<PrgpError> for CliError {
    fn from(e: PrgpError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(PrgpError::Csv(e))
    }
}

/// The one place errors reach the user.
pub fn print_error(e: &CliError) {
    eprintln!("prgp: error[{}]: {e}", e.category());
}
