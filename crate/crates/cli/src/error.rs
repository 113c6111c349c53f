use std::io;
use std::path::PathBuf;

use letflow::eval::EvalError;
use letflow::letnet::WeightsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read image {}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },
    #[error("cannot write {}: {reason}", path.display())]
    Write { path: PathBuf, reason: String },
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: io::Error },
    #[error("weights {}: {source}", path.display())]
    Weights { path: PathBuf, source: WeightsError },
    #[error("{}, line {line}: {reason}", path.display())]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("config file {}: {reason}", path.display())]
    ConfigFile { path: PathBuf, reason: String },
    #[error("sequence {}: {reason}", path.display())]
    Sequence { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image shapes differ: {a:?} vs {b:?}")]
    Shape { a: (usize, usize), b: (usize, usize) },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// 2 for bad input files, 3 for usage and shape problems, 4 for broken
    /// internal invariants.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Image { .. }
            | CliError::Write { .. }
            | CliError::Read { .. }
            | CliError::Weights { .. }
            | CliError::Parse { .. }
            | CliError::ConfigFile { .. }
            | CliError::Sequence { .. } => 2,
            CliError::Config(_) | CliError::Shape { .. } => 3,
            CliError::Eval(e) => match e {
                EvalError::PairShape { .. } | EvalError::FrameShape { .. } | EvalError::Flow(_) => 3,
                EvalError::TooFewFrames(_) => 2,
                _ => 4,
            },
            CliError::Internal(_) => 4,
        }
    }
}
