//! Discrete-event simulator for hybrid ordinary/parallel speculative decoding
//! between a target server and a remote draft server.

pub mod acceptance;
pub mod analytics;
pub mod cli;
pub mod draft;
pub mod config;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod presets;
pub mod sim;
pub mod target;
pub mod transport;
pub mod types;

pub use config::{validate_config, SimConfig, ValidatedConfig};
pub use error::{Error, Result};
pub use types::{Mode, RequestId, RoundId, SpeculativeSegment, Token};
