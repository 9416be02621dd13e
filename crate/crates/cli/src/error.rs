use std::fmt;

/// Failure of a subcommand, carrying its process exit status.
#[derive(Debug)]
pub enum CliError {
    /// A checked property or training run did not hold.
    Failure(String),
    /// Invalid flags or configuration.
    Usage(String),
    /// A file could not be read or written.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failure(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Failure(m) | CliError::Usage(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<mtla_core::Error> for CliError {
    fn from(e: mtla_core::Error) -> Self {
        use mtla_core::Error as E;
        match e {
            E::Io { .. } | E::CorruptCheckpoint(_) | E::UnsupportedVersion(_) => {
                CliError::Io(e.to_string())
            }
            E::Config(_) | E::Parameter(_) | E::Shape { .. } => CliError::Usage(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
