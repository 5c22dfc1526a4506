//! Streaming evaluation harness: synthetic scenarios, delay models,
//! oracle detectors, the virtual-clock simulator and the evaluators.

mod delay;
mod detector;
mod evaluate;
mod scenario;
mod stream;
pub mod training;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub use delay::{DelayKind, DelayModel};
pub use detector::{make_oracle, Detector, Oracle, OracleKind, PastSource};
pub use evaluate::{
    evaluate_offline_map_j, evaluate_sap, pair_streaming, EvalOptions, EvalResult, Pairing, PairingEntry,
    DEFAULT_OFFLINE_PAST,
};
pub use scenario::{generate_scenario, AccelerationSpec, ObjectSpec, Scenario, ScenarioSpec, VelocityEpisode};
pub use stream::{
    run_stream, Emission, Failure, FramePolicy, LoopRecord, StrategyToggles, StreamConfig, StreamTrace,
};

/// First 16 hex digits of the SHA-256 of `value`'s JSON form.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}
