//! CLI error type and exit-code policy: 0 success, 1 usage or configuration
//! problems, 2 numerical failures during computation.

use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    /// Config-file problems, reported all at once.
    Config(Vec<String>),
    /// Bad flags, missing files, inconsistent requests.
    Usage(String),
    /// File write failures.
    Io(PathBuf, std::io::Error),
    /// Errors surfaced by the core library.
    Core(flowgmm_core::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(path.to_path_buf(), e)
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(flowgmm_core::Error::Numerical(_)) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(errs) => {
                writeln!(f, "configuration problems:")?;
                for e in errs {
                    writeln!(f, "  - {e}")?;
                }
                Ok(())
            }
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Io(path, e) => write!(f, "{}: {e}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<flowgmm_core::Error> for CliError {
    fn from(e: flowgmm_core::Error) -> Self {
        CliError::Core(e)
    }
}
