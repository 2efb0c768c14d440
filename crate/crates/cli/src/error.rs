use ndpsim_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }

    /// 0 success, 2 configuration, 3 infeasible, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::Infeasible(_) => 3,
                CoreError::Io(_) => 4,
                CoreError::Config(_)
                | CoreError::Structural(_)
                | CoreError::Parse { .. }
                | CoreError::Validation { .. }
                | CoreError::Truncated { .. } => 2,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_per_class() {
        let io = || std::io::Error::from(std::io::ErrorKind::NotFound);
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(CoreError::Infeasible("x".into())).exit_code(), 3);
        assert_eq!(CliError::io("x", io()).exit_code(), 4);
        assert_eq!(CliError::from(CoreError::Io(io())).exit_code(), 4);
        assert_eq!(CliError::from(CoreError::Parse { line: 1, msg: "m".into() }).exit_code(), 2);
    }
}
