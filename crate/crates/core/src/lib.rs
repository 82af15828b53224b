//! Trace-driven analysis of unnecessary lock contention.
//!
//! The pipeline records a workload under virtual time ([`replay::record`]),
//! classifies same-lock section pairs ([`detect`]), rewrites the trace so
//! that only true conflicts stay serialized ([`transform`]), replays both
//! traces ([`replay`]) and ranks code regions by recoverable time ([`perf`]).

pub mod corpus;
pub mod detect;
mod engine;
pub mod error;
pub mod par;
pub mod perf;
pub mod pipeline;
pub mod replay;
pub mod trace;
pub mod transform;
pub mod workload;

pub use error::{Error, Result};
