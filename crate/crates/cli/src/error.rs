use std::fmt;

use retain_core::merge::MergeError;
use retain_core::pathlab::PathError;
use retain_core::tensorstore::StoreError;
use retain_core::toylab::LabError;

/// Process exit codes.
pub mod exit {
    pub const IO: i32 = 1;
    pub const SCHEMA: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const NON_FINITE: i32 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: exit::CONFIG, message: message.into() }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self { code: exit::SCHEMA, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: exit::IO, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn store_code(e: &StoreError) -> i32 {
    match e {
        StoreError::ShapeMismatch { .. } | StoreError::DtypeMismatch { .. } => exit::SCHEMA,
        // Unreadable, unwritable or malformed checkpoint files.
        _ => exit::IO,
    }
}

fn merge_code(e: &MergeError) -> i32 {
    match e {
        MergeError::SchemaMismatch { .. } => exit::SCHEMA,
        MergeError::Store(inner) => store_code(inner),
        MergeError::ContinualStep { source, .. } => merge_code(source),
        _ => exit::CONFIG,
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        Self { code: store_code(&e), message: e.to_string() }
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        Self { code: merge_code(&e), message: e.to_string() }
    }
}

impl From<PathError> for CliError {
    fn from(e: PathError) -> Self {
        Self::schema(e.to_string())
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(_) | LabError::UnknownRegime(_) => Self::usage(e.to_string()),
            LabError::Schema(_) => Self::schema(e.to_string()),
            LabError::NonFiniteLoss { .. } => Self { code: exit::NON_FINITE, message: e.to_string() },
            LabError::Merge(m) => m.into(),
            LabError::Path(p) => p.into(),
            LabError::Store(s) => s.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
