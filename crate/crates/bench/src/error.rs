use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error("reading {path}: {source}")]
    ReadConfig {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    ParseConfig {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("run failed: {0}")]
    Run(#[from] fastadasp::Error),
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{failed} of {total} sweep cells failed")]
    SweepFailures { failed: usize, total: usize },
}

impl BenchError {
    /// 2 for configuration problems, 3 for anything that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) | BenchError::ReadConfig { .. } | BenchError::ParseConfig { .. } => 2,
            BenchError::Run(e) if is_config_error(e) => 2,
            _ => 3,
        }
    }
}

fn is_config_error(e: &fastadasp::Error) -> bool {
    matches!(e, fastadasp::Error::Config(_) | fastadasp::Error::UnknownId { .. })
}

pub type Result<T> = std::result::Result<T, BenchError>;
