//! Dual Teager-energy spike detection with an online adaptive threshold.
//!
//! The detector runs the Teager energy operator on the raw signal and on a
//! two-sample moving average, compares each against a threshold derived from
//! a feedback estimate of the noise spread, and ORs the two crossing streams.
//! A floating-point reference and a bit-exact integer datapath (with a
//! multichannel scheduler) are provided, together with baseline detectors, a
//! synthetic data generator and an evaluation harness.

pub mod bench;
pub mod dataio;
pub mod detector;
pub mod error;
pub mod hw;
pub mod metrics;
pub mod signal;
pub mod threshold;
pub mod transforms;

pub use detector::{detect, DetectorKind, DetectorParams, EventFormationConfig, SpikeEvent, SpikeEventList};
pub use error::{Error, Result};
pub use hw::{hw_detect_channel, hw_detect_multichannel, HwConfig};
pub use metrics::{accuracy, match_events, MatchReport};
pub use signal::{FixedPointFormat, QuantizedRecord, SignalRecord};
pub use threshold::ThresholdCoefficients;
