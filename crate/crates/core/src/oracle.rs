//! Synthetic ground truth. A hash of `(seed, request, position)` defines the
//! reference token stream; the drafter agrees with it per position with
//! probability α; verification is greedy exact-prefix matching plus one
//! bonus token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::types::{RequestId, RoundId, SpeculativeSegment, Token};

const TOKEN_MASK: u64 = (1 << 63) - 1;

/// XORed into a reference token to produce a guaranteed mismatch. Non-zero
/// and below 2^63, so the result stays a valid non-PAD token.
pub const MISMATCH_XOR: u64 = 0x2545_f491_4f6c_dd1d;

const AGREEMENT_SALT: u64 = 0xa076_1d64_78bd_642f;
const PROMPT_SALT: u64 = 0xe703_7ed1_a0b4_28db;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn key(seed: u64, req: u64, pos: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ req) ^ pos)
}

/// Maps a hash to a uniform float in `[0, 1)`.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A token that never equals `t`.
pub fn mismatch(t: Token) -> Token {
    Token(t.0 ^ MISMATCH_XOR)
}

/// Deterministic per-request reference streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStreamOracle {
    pub seed: u64,
}

/// Result of verifying one candidate against the reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    /// Length of the candidate prefix that matches the reference.
    pub accepted_count: usize,
    /// Accepted prefix followed by the bonus.
    pub committed: Vec<Token>,
    pub bonus: Token,
    /// Position after the bonus.
    pub new_position: usize,
}

impl TokenStreamOracle {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn reference_token(&self, request: RequestId, position: usize) -> Token {
        Token(key(self.seed, request.0, position as u64) & TOKEN_MASK)
    }

    pub fn reference_slice(&self, request: RequestId, start: usize, len: usize) -> Vec<Token> {
        (start..start + len)
            .map(|p| self.reference_token(request, p))
            .collect()
    }

    /// Synthetic prompt of a request, independent of its output stream.
    pub fn prompt(&self, request: RequestId, len: usize) -> Vec<Token> {
        (0..len)
            .map(|p| Token(key(self.seed ^ PROMPT_SALT, request.0, p as u64) & TOKEN_MASK))
            .collect()
    }

    /// Greedy verification of `candidate` placed at `start`. PAD never matches.
    pub fn verify(&self, request: RequestId, start: usize, candidate: &[Token]) -> VerifyOutcome {
        let mut committed = Vec::with_capacity(candidate.len() + 1);
        for (j, &tok) in candidate.iter().enumerate() {
            let r = self.reference_token(request, start + j);
            if tok != r {
                break;
            }
            committed.push(r);
        }
        let accepted_count = committed.len();
        let bonus = self.reference_token(request, start + accepted_count);
        committed.push(bonus);
        VerifyOutcome {
            accepted_count,
            committed,
            bonus,
            new_position: start + accepted_count + 1,
        }
    }
}

/// Decides whether the drafter reproduces the reference at a position.
pub trait DraftAgreement {
    fn agrees(&mut self, request: RequestId, position: usize, alpha: f64) -> bool;
}

/// Draws agreement from an RNG, consuming one draw per position.
pub struct SampledAgreement<'a, R: Rng>(pub &'a mut R);

impl<R: Rng> DraftAgreement for SampledAgreement<'_, R> {
    fn agrees(&mut self, _request: RequestId, _position: usize, alpha: f64) -> bool {
        self.0.random::<f64>() < alpha
    }
}

/// Agreement keyed on `(seed, request, position)`. A position drafted twice
/// gets the same outcome, so variants run with the same seed see the same
/// draft quality at every position.
#[derive(Debug, Clone, Copy)]
pub struct KeyedAgreement {
    pub seed: u64,
}

impl KeyedAgreement {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn draw(&self, request: RequestId, position: usize) -> f64 {
        unit(key(self.seed ^ AGREEMENT_SALT, request.0, position as u64))
    }
}

impl DraftAgreement for KeyedAgreement {
    fn agrees(&mut self, request: RequestId, position: usize, alpha: f64) -> bool {
        self.draw(request, position) < alpha
    }
}

/// Proposes `count` draft tokens starting at `start`, each equal to the
/// reference with probability `alpha`.
pub fn draft_propose<R: Rng>(
    oracle: &TokenStreamOracle,
    request: RequestId,
    start: usize,
    count: usize,
    alpha: f64,
    rng: &mut R,
) -> SpeculativeSegment {
    draft_propose_with(
        oracle,
        request,
        start,
        count,
        alpha,
        &mut SampledAgreement(rng),
        RoundId(0),
    )
}

pub fn draft_propose_with<A: DraftAgreement + ?Sized>(
    oracle: &TokenStreamOracle,
    request: RequestId,
    start: usize,
    count: usize,
    alpha: f64,
    agreement: &mut A,
    origin_round: RoundId,
) -> SpeculativeSegment {
    let tokens = (start..start + count)
        .map(|pos| {
            let r = oracle.reference_token(request, pos);
            if agreement.agrees(request, pos, alpha) {
                r
            } else {
                mismatch(r)
            }
        })
        .collect();
    SpeculativeSegment::new(tokens, origin_round, start)
}
