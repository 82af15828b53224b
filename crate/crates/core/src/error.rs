use thiserror::Error;

use crate::trace::{CsId, EventRef, ThreadId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report. `code()` yields the stable
/// machine-readable name used in CLI error records.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("invariant violated ({invariant}){}", at.map(|e| format!(" at {e}")).unwrap_or_default())]
    InvariantViolation {
        invariant: String,
        at: Option<EventRef>,
    },

    #[error("marker `{0}` not found")]
    MarkerNotFound(String),

    #[error("slice boundary cuts thread {tid} while it holds {lock}")]
    UnbalancedSlice { tid: ThreadId, lock: String },

    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax {
        line: usize,
        col: usize,
        msg: String,
    },

    #[error("{line}:{col}: unbalanced lock: {msg}")]
    UnbalancedLock {
        line: usize,
        col: usize,
        msg: String,
    },

    #[error("{line}:{col}: register `{reg}` used before any read binds it")]
    UnboundRegister {
        line: usize,
        col: usize,
        reg: String,
    },

    #[error("deadlock: wait cycle {}", fmt_cycle(.cycle))]
    Deadlock { cycle: Vec<ThreadId> },

    #[error("schedule order unsatisfiable: {detail}")]
    OrderUnsatisfiable { detail: String },

    #[error("policy prerequisite missing: {0}")]
    PolicyPrerequisite(String),

    #[error("section {0} contains a write without a value expression")]
    NotReexecutable(CsId),

    #[error("cyclic ordering constraint: {0}")]
    CyclicConstraint(String),

    #[error("missing timing label `{0}`")]
    MissingLabel(String),

    #[error("unknown workload `{0}`")]
    UnknownWorkload(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn fmt_cycle(cycle: &[ThreadId]) -> String {
    cycle
        .iter()
        .map(|t| format!("T{t}"))
        .collect::<Vec<_>>()
        .join(" -> ")
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::MalformedRecord { .. } => "MALFORMED_RECORD",
            Error::InvariantViolation { .. } => "INVARIANT_VIOLATION",
            Error::MarkerNotFound(_) => "MARKER_NOT_FOUND",
            Error::UnbalancedSlice { .. } => "UNBALANCED_SLICE",
            Error::Syntax { .. } => "SYNTAX_ERROR",
            Error::UnbalancedLock { .. } => "UNBALANCED_LOCK",
            Error::UnboundRegister { .. } => "UNBOUND_REGISTER",
            Error::Deadlock { .. } => "DEADLOCK",
            Error::OrderUnsatisfiable { .. } => "ORDER_UNSATISFIABLE",
            Error::PolicyPrerequisite(_) => "POLICY_PREREQUISITE",
            Error::NotReexecutable(_) => "NOT_REEXECUTABLE",
            Error::CyclicConstraint(_) => "CYCLIC_CONSTRAINT",
            Error::MissingLabel(_) => "MISSING_LABEL",
            Error::UnknownWorkload(_) => "UNKNOWN_WORKLOAD",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
        }
    }

    /// True for errors caused by bad input files rather than by analysis.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::MalformedRecord { .. }
                | Error::InvariantViolation { .. }
                | Error::Syntax { .. }
                | Error::UnbalancedLock { .. }
                | Error::UnboundRegister { .. }
                | Error::UnknownWorkload(_)
                | Error::InvalidArgument(_)
                | Error::MarkerNotFound(_)
        )
    }

    pub(crate) fn invariant(invariant: impl Into<String>, at: Option<EventRef>) -> Self {
        Error::InvariantViolation {
            invariant: invariant.into(),
            at,
        }
    }
}
