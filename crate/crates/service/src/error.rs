use thiserror::Error;

/// Failure of a CLI command. The variant decides the exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or unusable input files.
    #[error("{0}")]
    Input(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn input(msg: impl std::fmt::Display) -> Self {
        CliError::Input(msg.to_string())
    }

    pub fn runtime(msg: impl std::fmt::Display) -> Self {
        CliError::Runtime(msg.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// Single-line rendering for stderr.
    pub fn one_line(&self) -> String {
        let kind = match self {
            CliError::Input(_) => "input",
            CliError::Runtime(_) => "runtime",
        };
        let text = self.to_string();
        let flat: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        format!("error[{kind}]: {}", flat.join("; "))
    }
}

impl From<splat_avatar::Error> for CliError {
    fn from(e: splat_avatar::Error) -> Self {
        use splat_avatar::Error as E;
        match e {
            E::Diverged { .. } | E::Pipeline { .. } | E::Io { .. } | E::MissingState(_) => CliError::runtime(e),
            _ => CliError::input(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
