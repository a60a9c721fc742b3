use std::fmt;

pub type Result<T, E = ToolError> = std::result::Result<T, E>;

/// 1-based line number, when known.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Line(pub Option<u64>);

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(l) => write!(f, "line {l}: "),
            None => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum ToolError {
    #[error(transparent)]
    Core(#[from] dml_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{line}{message}")]
    Format { line: Line, message: String },
    #[error("line {line}, column {column}: {message}")]
    Value { line: u64, column: u64, message: String },
    #[error("input is empty")]
    EmptyInput,
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    /// Flag combinations clap cannot reject on its own.
    #[error("{0}")]
    Usage(String),
}

impl ToolError {
    pub fn format(line: Option<u64>, message: impl Into<String>) -> Self {
        ToolError::Format { line: Line(line), message: message.into() }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ToolError::Core(e) => e.code(),
            ToolError::Io(_) => "io_error",
            ToolError::Format { .. } => "format_error",
            ToolError::Value { .. } => "value_error",
            ToolError::EmptyInput => "empty_input",
            ToolError::Truncated(_) => "truncated",
            ToolError::Version(_) => "version_error",
            ToolError::Json(_) => "json_error",
            ToolError::Usage(_) => "usage_error",
        }
    }

    /// Process exit code: 1 for usage errors, 2 for everything data related.
    pub fn exit_code(&self) -> i32 {
        match self {
            ToolError::Usage(_) => 1,
            _ => 2,
        }
    }
}
