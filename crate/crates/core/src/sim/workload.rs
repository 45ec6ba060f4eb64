//! Request arrival streams for target traffic and the draft server's own
//! background tenants.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::RequestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrafficClass {
    TargetTraffic,
    DraftBackground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub id: RequestId,
    pub arrival: f64,
    pub prompt_len: usize,
    pub output_len: usize,
    pub class: TrafficClass,
}

/// Requests sorted by arrival time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub items: Vec<WorkItem>,
}

impl Workload {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn arrivals(&self) -> Vec<f64> {
        self.items.iter().map(|w| w.arrival).collect()
    }

    fn from_times(times: Vec<f64>, prompt_len: usize, output_len: usize, class: TrafficClass) -> Self {
        Self {
            items: times
                .into_iter()
                .enumerate()
                .map(|(i, arrival)| WorkItem {
                    id: RequestId(i as u64),
                    arrival,
                    prompt_len,
                    output_len,
                    class,
                })
                .collect(),
        }
    }

    /// Sets prompt and output lengths on every item.
    #[must_use]
    pub fn with_lengths(mut self, prompt_len: usize, output_len: usize) -> Self {
        for w in &mut self.items {
            w.prompt_len = prompt_len;
            w.output_len = output_len;
        }
        self
    }

    /// Reads one arrival time per line. Blank lines and `#` comments are
    /// skipped; times must be non-decreasing.
    pub fn from_arrival_file(path: &Path, prompt_len: usize, output_len: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut times = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let t: f64 = line
                .parse()
                .map_err(|_| Error::Parse(format!("{}:{}: bad arrival `{line}`", path.display(), n + 1)))?;
            if !(t.is_finite() && t >= 0.0) || times.last().is_some_and(|&p| t < p) {
                return Err(Error::Parse(format!(
                    "{}:{}: arrivals must be finite, non-negative and non-decreasing",
                    path.display(),
                    n + 1
                )));
            }
            times.push(t);
        }
        Ok(Self::from_times(times, prompt_len, output_len, TrafficClass::TargetTraffic))
    }
}

/// Cumulative sums of unit exponentials scaled by `1/qps`. The same RNG
/// state gives proportionally scaled arrivals at every rate; `qps = 0`
/// places every arrival at t=0.
fn poisson_times<R: Rng>(qps: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            if qps > 0.0 {
                t += e / qps;
            }
            t
        })
        .collect()
}

/// `n` target requests with exponential inter-arrivals of mean `1/qps`.
pub fn generate_arrivals<R: Rng>(qps: f64, n: usize, rng: &mut R) -> Workload {
    Workload::from_times(poisson_times(qps, n, rng), 0, 0, TrafficClass::TargetTraffic)
}

/// Background tenant requests served only by the draft server.
pub fn generate_background<R: Rng>(qps: f64, n: usize, output_len: usize, prompt_len: usize, rng: &mut R) -> Workload {
    if qps <= 0.0 {
        return Workload::default();
    }
    Workload::from_times(poisson_times(qps, n, rng), prompt_len, output_len, TrafficClass::DraftBackground)
}
