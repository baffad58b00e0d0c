//! Exit-code classification.
//!
//! 0 success, 2 IO or parse failure, 3 precondition or validation failure,
//! 4 remote-service failure.

use chameleon_core::datagen::DatagenError;
use chameleon_core::editing::EditError;
use chameleon_core::eval::EvalError;
use chameleon_core::history::HistoryError;
use chameleon_core::llm::LlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Io,
    Precondition,
    Remote,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Io => 2,
            Kind::Precondition => 3,
            Kind::Remote => 4,
        }
    }
}

/// An error tagged with its exit category.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl Failure {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

pub fn precondition(message: impl Into<String>) -> anyhow::Error {
    Failure::new(Kind::Precondition, message).into()
}

pub fn io_failure(message: impl Into<String>) -> anyhow::Error {
    Failure::new(Kind::Io, message).into()
}

fn classify(cause: &(dyn std::error::Error + 'static)) -> Option<Kind> {
    if let Some(f) = cause.downcast_ref::<Failure>() {
        return Some(f.kind);
    }
    if let Some(e) = cause.downcast_ref::<LlmError>() {
        return Some(if e.is_remote() { Kind::Remote } else { Kind::Precondition });
    }
    if let Some(e) = cause.downcast_ref::<DatagenError>() {
        return match e {
            DatagenError::Parse { .. } => Some(Kind::Io),
            DatagenError::AllQueriesFailed(f) if f.iter().any(|q| q.remote) => Some(Kind::Remote),
            DatagenError::History(h) => classify(h),
            _ => None,
        };
    }
    if let Some(e) = cause.downcast_ref::<HistoryError>() {
        return match e {
            HistoryError::Parse { .. } => Some(Kind::Io),
            _ => None,
        };
    }
    if let Some(e) = cause.downcast_ref::<EditError>() {
        return match e {
            EditError::Io { .. } | EditError::Format { .. } | EditError::ProfileParse(_) => Some(Kind::Io),
            _ => None,
        };
    }
    if let Some(e) = cause.downcast_ref::<EvalError>() {
        return match e {
            EvalError::Json(_) | EvalError::Parse { .. } => Some(Kind::Io),
            _ => None,
        };
    }
    if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
        return Some(Kind::Io);
    }
    None
}

/// The first classifiable cause decides; unclassified errors are
/// precondition failures.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    // Remote failures anywhere in the chain win, so wrapped LLM errors keep
    // code 4 even under a more specific outer error.
    let kinds: Vec<Kind> = err.chain().filter_map(classify).collect();
    if kinds.contains(&Kind::Remote) {
        return Kind::Remote.code();
    }
    kinds.first().copied().unwrap_or(Kind::Precondition).code()
}
