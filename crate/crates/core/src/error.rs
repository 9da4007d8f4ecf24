//! Error types shared across the crate.
//!
//! Contract violations (shape mismatches, non-scalar backward roots) panic
//! with both offending values in the message; recoverable conditions
//! (domain errors, solver divergence, bad files) surface as [`Error`].

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A time or argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A solver state became non-finite.
    #[error("integration diverged at t = {t} (state norm {norm})")]
    Diverged { t: f64, norm: f64 },

    /// The adaptive solver exhausted its step budget.
    #[error("adaptive solver exceeded max_steps = {max_steps} at t = {t}")]
    BudgetExceeded { max_steps: usize, t: f64 },

    /// A file did not match its declared format.
    #[error("format error in {path:?} at byte offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Checkpoint version or payload mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
