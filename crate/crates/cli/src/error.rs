use std::fmt;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, flags or incompatible inputs (exit 2).
    Config(String),
    /// Missing, unreadable or malformed data (exit 3).
    Data(String),
    /// Non-finite loss or other numeric breakdown (exit 4).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Config(m) => ("configuration error", m),
            CliError::Data(m) => ("data error", m),
            CliError::Numeric(m) => ("numeric failure", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl From<transip::Error> for CliError {
    fn from(e: transip::Error) -> Self {
        use transip::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Incompatible(_) => CliError::Config(msg),
            E::NonFiniteLoss { .. } | E::Tensor(_) => CliError::Numeric(msg),
            E::InvalidInput(_) | E::Record { .. } | E::Io { .. } | E::Checkpoint { .. } | E::Csv(_) => {
                CliError::Data(msg)
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Wraps an I/O error on `path` as a data error.
pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
