use std::fmt;
use std::io::ErrorKind;
use std::path::Path;

use dtq_core::DtqError;

/// Failure class of a command; each maps to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Other,
    Config,
    MissingInput,
    InfeasibleBudget,
    BadInput,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Other => 1,
            Category::Config => 2,
            Category::MissingInput => 3,
            Category::InfeasibleBudget => 4,
            Category::BadInput => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Other => "internal",
            Category::Config => "config",
            Category::MissingInput => "missing-input",
            Category::InfeasibleBudget => "infeasible-budget",
            Category::BadInput => "bad-input",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn bad_input(message: impl Into<String>) -> Self {
        Self::new(Category::BadInput, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category.as_str(), self.message)
    }
}

impl From<DtqError> for CliError {
    fn from(e: DtqError) -> Self {
        let category = match &e {
            DtqError::InfeasibleBudget(_) => Category::InfeasibleBudget,
            DtqError::Io { source, .. } if source.kind() == ErrorKind::NotFound => Category::MissingInput,
            DtqError::BadMagic { .. }
            | DtqError::Version { .. }
            | DtqError::Truncated { .. }
            | DtqError::Packing { .. }
            | DtqError::Format(_)
            | DtqError::Json(_) => Category::BadInput,
            _ => Category::Other,
        };
        CliError::new(category, e.to_string())
    }
}

/// Errors while reading `path` as a command input: a missing file gets its
/// own category, anything unparsable is bad input.
pub fn input_error(path: &Path, e: DtqError) -> CliError {
    match CliError::from(e) {
        CliError {
            category: Category::Other,
            message,
        } => CliError::bad_input(format!("{}: {message}", path.display())),
        other => other,
    }
}
