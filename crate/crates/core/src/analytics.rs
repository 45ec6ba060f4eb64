//! Closed-form throughput model for the two coordination modes and the
//! switching threshold between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Mode;

/// Inputs of the throughput model. Latencies are in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputParams {
    pub batch: f64,
    /// Committed tokens per request per round.
    pub accept_len: f64,
    pub gamma: f64,
    pub t_draft: f64,
    pub t_target: f64,
    /// Fallback ratio; only read by the parallel formula.
    pub r: f64,
}

impl ThroughputParams {
    pub fn new(batch: usize, accept_len: f64, gamma: usize, t_target: f64, t_draft: f64) -> Self {
        Self {
            batch: batch as f64,
            accept_len,
            gamma: gamma as f64,
            t_draft,
            t_target,
            r: 0.0,
        }
    }

    #[must_use]
    pub fn with_r(mut self, r: f64) -> Self {
        self.r = r;
        self
    }

    /// Checks the shared preconditions (positive latencies, B ≥ 1, L ≥ 1,
    /// γ ≥ 1, r ∈ [0,1]).
    pub fn check(&self) -> Result<()> {
        let ok = self.t_target > 0.0
            && self.t_draft > 0.0
            && self.batch >= 1.0
            && self.accept_len >= 1.0
            && self.gamma >= 1.0
            && (0.0..=1.0).contains(&self.r);
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid throughput parameters: {self:?}")))
        }
    }
}

/// Serialized mode: each round pays T_T plus γ−1 draft steps.
pub fn ordinary_throughput(p: &ThroughputParams) -> f64 {
    p.batch * p.accept_len / (p.t_target + (p.gamma - 1.0) * p.t_draft)
}

/// Overlapped mode: a fraction r of requests commits a single token.
pub fn parallel_throughput(p: &ThroughputParams) -> f64 {
    p.batch * (p.r + (1.0 - p.r) * p.accept_len) / p.t_target
}

/// Fallback ratio at which both modes have equal throughput. Not clamped.
pub fn critical_fallback_ratio(p: &ThroughputParams) -> Result<f64> {
    if p.accept_len.is_nan() || p.accept_len <= 1.0 {
        return Err(Error::Domain(format!(
            "critical fallback ratio requires L>1 (got L={})",
            p.accept_len
        )));
    }
    let num = (p.gamma - 1.0) * p.accept_len * p.t_draft;
    let den = (p.t_target + (p.gamma - 1.0) * p.t_draft) * (p.accept_len - 1.0);
    Ok(num / den)
}

/// PARALLEL iff `r_hat <= r_star`.
pub fn preferred_mode(r_hat: f64, r_star: f64) -> Mode {
    if r_hat <= r_star {
        Mode::Parallel
    } else {
        Mode::Ordinary
    }
}

/// Expected accepted prefix plus bonus when each of `gamma` draft tokens
/// independently agrees with probability `alpha`.
pub fn expected_committed_per_round(alpha: f64, gamma: usize) -> f64 {
    if alpha >= 1.0 {
        return gamma as f64 + 1.0;
    }
    (1.0 - alpha.powi(gamma as i32 + 1)) / (1.0 - alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> ThroughputParams {
        ThroughputParams::new(32, 3.0, 4, 0.050, 0.005)
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn ordinary_worked_value() {
        // 32*3 / (0.050 + 3*0.005)
        let expect = 96.0 / 0.065;
        assert!(rel(ordinary_throughput(&worked()), expect) < 1e-12);
        assert!((ordinary_throughput(&worked()) - 1476.92).abs() < 0.01);
    }

    #[test]
    fn ordinary_ignores_r() {
        let base = ordinary_throughput(&worked());
        for r in [0.0, 0.5, 1.0] {
            assert_eq!(ordinary_throughput(&worked().with_r(r)), base);
        }
        let single = ThroughputParams::new(1, 1.0, 1, 1.0, 123.0);
        assert_eq!(ordinary_throughput(&single), 1.0);
    }

    #[test]
    fn parallel_worked_values() {
        assert!(rel(parallel_throughput(&worked().with_r(0.2)), 1664.0) < 1e-12);
        assert!(rel(parallel_throughput(&worked().with_r(1.0)), 640.0) < 1e-12);
        assert!(rel(parallel_throughput(&worked().with_r(0.0)), 1920.0) < 1e-12);
    }

    #[test]
    fn threshold_worked_value() {
        let r = critical_fallback_ratio(&worked()).unwrap();
        assert!(rel(r, 0.045 / 0.130) < 1e-12);
        assert!((r - 0.34615).abs() < 1e-5);
        let g1 = ThroughputParams::new(8, 2.5, 1, 0.05, 0.005);
        assert_eq!(critical_fallback_ratio(&g1).unwrap(), 0.0);
        let l1 = ThroughputParams::new(8, 1.0, 4, 0.05, 0.005);
        let err = critical_fallback_ratio(&l1).unwrap_err().to_string();
        assert!(err.contains("requires L>1"), "{err}");
    }

    #[test]
    fn mode_rule() {
        assert_eq!(preferred_mode(0.2, 0.34615), Mode::Parallel);
        assert_eq!(preferred_mode(0.5, 0.34615), Mode::Ordinary);
        assert_eq!(preferred_mode(0.34615, 0.34615), Mode::Parallel);
    }

    #[test]
    fn expected_commit_values() {
        assert_eq!(expected_committed_per_round(1.0, 4), 5.0);
        assert_eq!(expected_committed_per_round(0.0, 4), 1.0);
        // 1 + .8 + .64 + .512 + .4096
        assert!((expected_committed_per_round(0.8, 4) - 3.3616).abs() < 1e-12);
    }

    #[test]
    fn check_rejects_bad_params() {
        assert!(worked().check().is_ok());
        assert!(ThroughputParams::new(0, 3.0, 4, 0.05, 0.005).check().is_err());
        assert!(worked().with_r(1.5).check().is_err());
    }
}
