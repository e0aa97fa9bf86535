use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("missing inputs:{}", list(.0))]
    MissingInputs(Vec<PathBuf>),

    #[error(transparent)]
    Core(#[from] ensf_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn list(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| format!("\n  {}", p.display())).collect()
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// 2 for bad configuration, 3 for divergence or too many failed
    /// trials, 4 for missing inputs, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_divergence() => 3,
            CliError::Core(ensf_core::Error::Argument(_)) => 2,
            CliError::MissingInputs(_) => 4,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::MissingInputs(vec!["a".into()]).exit_code(), 4);
        let diverged = ensf_core::Error::ExperimentFailed { failed: 6, total: 10 };
        assert_eq!(CliError::from(diverged).exit_code(), 3);
        let io = std::io::Error::new(std::io::ErrorKind::Other, "disk");
        assert_eq!(CliError::io("f")(io).exit_code(), 1);
    }

    #[test]
    fn missing_inputs_are_listed() {
        let e = CliError::MissingInputs(vec!["out/a.csv".into(), "out/b.csv".into()]);
        assert_eq!(e.to_string(), "missing inputs:\n  out/a.csv\n  out/b.csv");
    }
}
