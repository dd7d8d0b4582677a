//! Error categories and their process exit codes.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Internal,
    Usage,
    Config,
    MissingFile,
    Data,
    Checkpoint,
    Numeric,
}

impl Category {
    pub fn code(self) -> i32 {
        match self {
            Category::Internal => 1,
            Category::Usage => 2,
            Category::Config => 3,
            Category::MissingFile => 4,
            Category::Data => 5,
            Category::Checkpoint => 6,
            Category::Numeric => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::Usage => "usage",
            Category::Config => "config",
            Category::MissingFile => "missing-file",
            Category::Data => "data",
            Category::Checkpoint => "checkpoint",
            Category::Numeric => "numeric",
        }
    }
}

pub const TABLE: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage: unknown subcommand or flag, malformed argument
  3  config: invalid configuration or missing required option
  4  missing-file: an input file or benchmark dataset is absent or unreadable
  5  data: schema or data file rejected
  6  checkpoint: corrupt or incompatible checkpoint
  7  numeric: non-finite loss or gradient during training

Errors are reported on stderr as one line: `error[<category>]: <message>`.";

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

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
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // one line, whatever the source message looks like
        let msg = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: {msg}", self.category.name())
    }
}

impl From<alf_core::Error> for CliError {
    fn from(e: alf_core::Error) -> Self {
        use alf_core::Error as E;
        let category = match &e {
            E::Config(_) => Category::Config,
            E::MissingDataset { .. } | E::Io { .. } => Category::MissingFile,
            E::Schema(_) | E::Data { .. } | E::Csv(_) | E::Json(_) | E::Invalid(_) => Category::Data,
            E::Checkpoint(_) => Category::Checkpoint,
            E::NonFiniteLoss { .. } | E::NonFiniteGradient(_) => Category::Numeric,
            E::Shape { .. } | E::NonScalarLoss(_) => Category::Internal,
        };
        Self::new(category, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::new(Category::MissingFile, format!("{}: {e}", path.display()))
}
