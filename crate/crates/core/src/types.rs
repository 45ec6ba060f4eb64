//! Shared domain vocabulary: tokens, identifiers, segments and execution modes.

use std::fmt;

use serde::{Deserialize, Serialize};

/// An opaque token symbol. Tokens carry no linguistic meaning and are only
/// ever compared for equality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u64);

impl Token {
    /// Padding sentinel placed in candidate slots that carry no draft prediction.
    /// Oracle streams only emit values below `2^63`, so this never collides.
    pub const PAD: Token = Token(u64::MAX);

    pub fn is_pad(self) -> bool {
        self == Self::PAD
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_pad() {
            f.write_str("PAD")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Identifier of a target-side request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "req{}", self.0)
    }
}

/// Decoding-round counter. Rounds advance by exactly one per completed
/// verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoundId(pub u64);

impl RoundId {
    #[must_use]
    pub fn next(self) -> Self {
        RoundId(self.0 + 1)
    }
}

impl fmt::Display for RoundId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// A run of draft tokens anchored at a 0-based position of a request's
/// output stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeculativeSegment {
    pub tokens: Vec<Token>,
    pub origin_round: RoundId,
    /// Output position of `tokens[0]`.
    pub start_position: usize,
}

impl SpeculativeSegment {
    pub fn new(tokens: Vec<Token>, origin_round: RoundId, start_position: usize) -> Self {
        Self {
            tokens,
            origin_round,
            start_position,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn first(&self) -> Option<Token> {
        self.tokens.first().copied()
    }

    /// Position one past the last token.
    pub fn end_position(&self) -> usize {
        self.start_position + self.tokens.len()
    }
}

/// Batch-level coordination mode for one verification round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// Verification waits until every rollback request has a repaired segment.
    Ordinary,
    /// Verification proceeds with padded candidates; the draft regenerates in the background.
    Parallel,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ordinary => "ORDINARY",
            Mode::Parallel => "PARALLEL",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ORDINARY" | "O" => Ok(Mode::Ordinary),
            "PARALLEL" | "P" => Ok(Mode::Parallel),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}
