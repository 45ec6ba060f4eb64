use std::fmt;

use thiserror::Error;

use crate::types::{RequestId, RoundId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigErrors),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("batch assembly failed for {request}: {reason}")]
    Assembly { request: RequestId, reason: String },

    #[error("protocol violation on {request}: committed position regressed from {from} to {to}")]
    CommitRegression {
        request: RequestId,
        from: usize,
        to: usize,
    },

    #[error("livelock: no commits for {idle_secs:.3}s of simulated time (at t={now:.3}s, round {round})")]
    Livelock {
        now: f64,
        idle_secs: f64,
        round: RoundId,
    },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One violated configuration invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Every invariant violated by a configuration, not just the first one.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl ConfigErrors {
    pub fn fields(&self) -> Vec<&'static str> {
        self.0.iter().map(|i| i.field).collect()
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

impl std::error::Error for ConfigErrors {}
