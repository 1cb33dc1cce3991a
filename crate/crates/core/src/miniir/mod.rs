//! A small SSA intermediate representation: text syntax, validation,
//! dominators and the analyses the instrumentation passes rely on.

pub mod analysis;
mod ast;
pub mod dom;
mod parse;
mod print;
mod validate;

pub use ast::*;
pub use parse::parse;
pub use print::{print, print_inst};
pub use validate::validate;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrError {
    #[error("line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("{}{msg}", .function.as_ref().map(|f| format!("in @{f}: ")).unwrap_or_default())]
    Invalid { function: Option<String>, msg: String },
}

impl IrError {
    pub(crate) fn parse(line: usize, col: usize, msg: impl Into<String>) -> Self {
        IrError::Parse {
            line,
            col,
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(function: Option<&str>, msg: impl Into<String>) -> Self {
        IrError::Invalid {
            function: function.map(str::to_string),
            msg: msg.into(),
        }
    }
}

/// Parses and validates program text.
pub fn load(text: &str) -> Result<Program, IrError> {
    let program = parse(text)?;
    validate(&program)?;
    Ok(program)
}

#[cfg(test)]
mod tests;
