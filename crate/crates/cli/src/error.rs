use treeflow::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(CoreError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(CoreError::Json(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(CoreError::Csv(e))
    }
}

impl CliError {
    /// Process exit code: 2 configuration, 3 I/O or format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(CoreError::InvalidArgument(_)) => 2,
            CliError::Core(CoreError::Numerical(_)) => 4,
            _ => 3,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Core(CoreError::InvalidArgument(_)) => "config error",
            CliError::Core(CoreError::Numerical(_)) => "numerical error",
            CliError::Core(CoreError::Format(_) | CoreError::UnsupportedVersion { .. }) => {
                "format error"
            }
            CliError::Core(CoreError::Io(_)) => "io error",
            _ => "data error",
        }
    }

    /// The whole error on one line, prefixed by its category.
    pub fn one_line(&self) -> String {
        let msg = self
            .to_string()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        format!("{}: {msg}", self.category())
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::CliError::Config(format!($($arg)*)) };
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::CliError::Input(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use input_err;

pub type CliResult<T> = Result<T, CliError>;
