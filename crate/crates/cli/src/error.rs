#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] igcap::Error),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use igcap::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(E::Numeric(_) | E::Degenerate(_)) => EXIT_NUMERIC,
            CliError::Core(E::Io { .. } | E::Parse { .. } | E::Format { .. } | E::OutOfVocabulary { .. }) => EXIT_DATA,
            CliError::Core(_) => EXIT_RUNTIME,
        }
    }
}
