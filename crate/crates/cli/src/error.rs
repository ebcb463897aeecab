use std::fmt;
use std::path::{Path, PathBuf};

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const INTERNAL: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const TOLERANCE: u8 = 5;
}

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing flags; carries the command's usage line.
    Usage {
        msg: String,
        usage: String,
    },
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Config {
        path: PathBuf,
        msg: String,
    },
    Core(abpem::Error),
    /// The gradient oracle disagreed with the analytic gradient.
    Tolerance(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        use abpem::Error as E;
        match self {
            CliError::Usage { .. } | CliError::Config { .. } => exit::USAGE,
            CliError::Io { .. } => exit::IO,
            CliError::Tolerance(_) => exit::TOLERANCE,
            CliError::Core(e) => match e {
                E::Parameter(_) => exit::USAGE,
                E::Io(_) | E::Json(_) | E::Format(_) => exit::IO,
                e if e.is_numeric() => exit::NUMERIC,
                _ => exit::INTERNAL,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage { msg, usage } => write!(f, "{msg}\n\n{usage}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Config { path, msg } => write!(f, "config {}: {msg}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Tolerance(msg) => write!(f, "tolerance breached: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<abpem::Error> for CliError {
    fn from(e: abpem::Error) -> Self {
        CliError::Core(e)
    }
}
