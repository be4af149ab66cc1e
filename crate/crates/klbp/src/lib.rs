//! File formats, brute-force oracles, JSON reports and the command-line
//! front end over `klbp-core`.

// Negated float comparisons are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod cli;
pub mod formats;
pub mod oracle;
pub mod report;

use std::fmt;

/// Input that could not be turned into a core object.
#[derive(Debug, Clone, PartialEq)]
pub enum FormatError {
    /// Malformed JSON or a field of the wrong shape.
    Schema(String),
    /// Well-formed input describing an invalid structure.
    Structure(Vec<String>),
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::Schema(m) => write!(f, "schema error: {m}"),
            FormatError::Structure(issues) => write!(f, "invalid structure: {}", issues.join("; ")),
        }
    }
}

impl std::error::Error for FormatError {}
