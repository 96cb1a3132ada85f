//! Architecture description language.
//!
//! A netspec file lists one layer stack per line (or `/`-separated on a line):
//!
//! ```text
//! NAME:alexnet-c100
//! INPUT:3x32x32
//! CONV:1x32x5            # <layers>x<filters>x<kernel>[,s=<stride>][,p=<pad>][,g=<groups>]
//! POOL:3,2,MAX           # <window>,<stride>,<MAX|AVE>, ceil-mode output size
//! LRN                    # optional :<n>,<alpha>,<beta>,<k>
//! FC:100                 # <width|c>
//! BLOCK{ CONV:1x64x3 / CONV:1x64x3 }x9
//! POLICY { lr=0.001:60; momentum=0.9; decay=0.004; init=random; batch=100 }
//! ```
//!
//! A document containing the symbolic width `c` is a branch template; anything
//! else is a complete network and must declare its `INPUT`.

mod baseline;
mod parse;
mod print;
pub mod shipped;
mod spec;
mod transform;

use thiserror::Error;

pub use baseline::{emit_param_matched_baseline, BaselineMode};
pub use parse::{parse_netspec, parse_netspec_with_input, ParsedSpec};
pub use spec::{
    build_stack, BoundBranch, BranchSpec, LayerSpec, NetSpec, NofESpec, ResidualBlock, Shape,
    TrainPolicy, Width,
};
pub use shipped::shipped;
pub use transform::{count_params, make_generalist, make_nofe, trunk_len, CountParams};

/// Position in netspec source text, 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourcePos {
    pub line: usize,
    pub column: usize,
}

impl std::fmt::Display for SourcePos {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}, column {}", self.line, self.column)
    }
}

fn at(pos: &Option<SourcePos>) -> String {
    pos.map(|p| format!(" ({p})")).unwrap_or_default()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetSpecError {
    #[error("{pos}: unknown layer kind '{kind}'")]
    UnknownLayer { kind: String, pos: SourcePos },
    #[error("{pos}: malformed layer triple '{text}': {reason}")]
    MalformedTriple {
        text: String,
        reason: String,
        pos: SourcePos,
    },
    #[error("{pos}: malformed {what} '{text}': {reason}")]
    Malformed {
        what: &'static str,
        text: String,
        reason: String,
        pos: SourcePos,
    },
    #[error("shape chain breaks at layer {index} ({layer}){}: {reason}", at(.pos))]
    ShapeChain {
        index: usize,
        layer: String,
        reason: String,
        pos: Option<SourcePos>,
    },
    #[error("missing terminal classifier{}: {reason}", at(.pos))]
    MissingTerminalFc {
        reason: String,
        pos: Option<SourcePos>,
    },
    #[error("network has no INPUT declaration")]
    MissingInput,
    #[error("symbolic width 'c' is only allowed in branch templates{}", at(.pos))]
    UnexpectedSymbolicWidth { pos: Option<SourcePos> },
    #[error("expected a {expected} spec, found a {found} spec")]
    WrongSpecKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("number of specialties must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("specialty sizes must be non-empty and positive, got {0:?}")]
    InvalidSpecialtySizes(Vec<usize>),
    #[error("network has no convolutional prefix to use as a trunk")]
    NoConvPrefix,
    #[error("target of {target} parameters is below the base count {base}")]
    TargetBelowBase { target: u64, base: u64 },
    #[error("no {mode} baseline within 5% of {target} parameters (closest {closest})")]
    UnreachableTarget {
        mode: &'static str,
        target: u64,
        closest: u64,
    },
    #[error("cannot instantiate '{name}': {reason}")]
    NotInstantiable { name: String, reason: String },
}

#[cfg(test)]
mod tests;
