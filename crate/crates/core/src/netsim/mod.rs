//! Deterministic discrete-event simulator of a hub and its devices.
//!
//! Time is virtual and counted in integer microseconds. A run is fully
//! determined by its [`SimConfig`]; the same config yields byte-identical
//! round traces and channel events.

mod engine;
mod output;
mod topology;
mod verify;
pub mod wallclock;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::command::DeviceId;
use crate::schedule::{ScheduleError, ScheduleSpec};
use crate::timelock::TimelockError;
use crate::token::TokenError;

pub use engine::{
    run, ChurnEvent, Delivery, ExecutionLog, ExecutionRecord, HopTiming, RecoveredUpload, RejectedJoin, RoundTrace,
    SimOutput, Simulation, Stall,
};
pub(crate) use output::mean_var;
pub use output::{ring_summaries, write_outputs, RingSummary, RunSummary};
pub use topology::{
    build_ring, partition_by_skew, partition_rings, skew_count, Capacities, Hop, LoadMode, Node, RingConfig, RingPlan,
    SkewPartition,
};
pub use verify::{verify_run, OwnerOrder, OwnerState};

pub const HUB: &str = "hub";
pub const NON_SKEW_SUB_FIELD: usize = 1024;
pub const SKEW_SUB_FIELD: usize = 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum NetsimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown device {0}")]
    Registry(DeviceId),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("incomplete run: {0}")]
    Incomplete(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Timelock(#[from] TimelockError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-hop transmission time `alpha + beta * bytes`, plus an optional
/// uniform jitter in `[0, jitter_us]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub alpha_us: u64,
    pub beta_us_per_byte: f64,
    pub jitter_us: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            alpha_us: 2000,
            beta_us_per_byte: 0.05,
            jitter_us: 0,
        }
    }
}

impl LatencyModel {
    pub fn fixed(alpha_us: u64) -> Self {
        LatencyModel {
            alpha_us,
            beta_us_per_byte: 0.0,
            jitter_us: 0,
        }
    }

    pub fn base_us(&self, bytes: usize) -> u64 {
        self.alpha_us + (self.beta_us_per_byte * bytes as f64).round() as u64
    }

    pub fn worst_us(&self, bytes: usize) -> u64 {
        self.base_us(bytes) + self.jitter_us
    }

    /// Latency of one hop. The jitter draw depends only on `hop_key`, so
    /// the channel timing of a hop never depends on protocol activity.
    pub fn sample_us(&self, bytes: usize, hop_key: u64) -> u64 {
        if self.jitter_us == 0 {
            return self.base_us(bytes);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(hop_key);
        self.base_us(bytes) + rng.gen_range(0..=self.jitter_us)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    #[default]
    Ring,
    Flower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    #[default]
    NonSkew,
    Skew,
}

impl DeviceKind {
    pub fn default_sub_field(self) -> usize {
        match self {
            DeviceKind::NonSkew => NON_SKEW_SUB_FIELD,
            DeviceKind::Skew => SKEW_SUB_FIELD,
        }
    }
}

/// How the hub spaces consecutive rounds of one ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TokenPeriod {
    /// A new round starts `slot_us` after the previous one started, or as
    /// soon as it ends if it overran the slot.
    Fixed { slot_us: u64 },
    /// Gap drawn uniformly from `[slot_us / 2, 3 * slot_us / 2]`.
    Random { slot_us: u64 },
}

impl Default for TokenPeriod {
    fn default() -> Self {
        TokenPeriod::Fixed { slot_us: 1_000_000 }
    }
}

impl TokenPeriod {
    pub fn gap_us<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            TokenPeriod::Fixed { slot_us } => slot_us,
            TokenPeriod::Random { slot_us } => rng.gen_range(slot_us / 2..=slot_us + slot_us / 2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    /// Charge `t_hat / S` of virtual time and obtain the solution from the
    /// owner's trapdoor.
    #[default]
    Modeled,
    /// Perform the squarings for real, still charging virtual time.
    Real,
}

/// `(rho, gamma, resources)` for one device.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceProfile {
    /// Expected command instants over a day, in milliseconds.
    pub rho: Vec<u64>,
    /// Devices whose commands must precede this device's.
    pub gamma: BTreeSet<DeviceId>,
    pub resources: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: DeviceId,
    #[serde(default = "default_rate")]
    pub squarings_per_sec: f64,
    /// Drawn uniformly from `[-t_diff, t_diff]` when absent.
    #[serde(default)]
    pub clock_offset_us: Option<i64>,
    #[serde(default)]
    pub kind: DeviceKind,
    #[serde(default)]
    pub profile: DeviceProfile,
}

fn default_rate() -> f64 {
    1_000_000.0
}

impl DeviceSpec {
    pub fn new(id: impl Into<DeviceId>) -> Self {
        DeviceSpec {
            id: id.into(),
            squarings_per_sec: default_rate(),
            clock_offset_us: None,
            kind: DeviceKind::NonSkew,
            profile: DeviceProfile::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub ring_id: String,
    pub devices: Vec<DeviceId>,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub period: TokenPeriod,
    #[serde(default = "default_command_capacity")]
    pub command_capacity: usize,
    /// Uniform sub-field size; each device's kind decides when absent.
    #[serde(default)]
    pub sub_field_bytes: Option<usize>,
    /// Device visits per round; the device count when absent.
    #[serde(default)]
    pub counter: Option<u32>,
}

fn default_command_capacity() -> usize {
    4096
}

impl RingSpec {
    pub fn new(ring_id: impl Into<String>, devices: Vec<DeviceId>) -> Self {
        RingSpec {
            ring_id: ring_id.into(),
            devices,
            topology: Topology::Ring,
            period: TokenPeriod::default(),
            command_capacity: default_command_capacity(),
            sub_field_bytes: None,
            counter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSpec {
    pub at_ms: u64,
    pub schedule: ScheduleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadSpec {
    pub device: DeviceId,
    pub at_ms: u64,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnSpec {
    pub device: DeviceId,
    pub at_ms: u64,
    pub event: ChurnEvent,
    /// Re-authenticate with a key the hub does not know.
    #[serde(default)]
    pub forged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: u64,
    /// Stop originating after this many rounds per ring.
    #[serde(default)]
    pub max_rounds: Option<u64>,
    #[serde(default)]
    pub latency: LatencyModel,
    /// Processing time per device visit.
    #[serde(default)]
    pub dwell_us: u64,
    #[serde(default = "default_t_diff")]
    pub t_diff_us: u64,
    #[serde(default)]
    pub solve_mode: SolveMode,
    #[serde(default = "default_prime_bits")]
    pub prime_bits: u64,
    /// Puzzle validity window after the order is issued; none when absent.
    #[serde(default)]
    pub validity_ms: Option<u64>,
    /// Spacing between the hub's originations of different rings.
    #[serde(default = "default_stagger")]
    pub hub_stagger_us: u64,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    pub rings: Vec<RingSpec>,
    #[serde(default)]
    pub orders: Vec<OrderSpec>,
    #[serde(default)]
    pub uploads: Vec<UploadSpec>,
    #[serde(default)]
    pub churn: Vec<ChurnSpec>,
}

fn default_t_diff() -> u64 {
    1000
}

fn default_prime_bits() -> u64 {
    64
}

fn default_stagger() -> u64 {
    1000
}

impl SimConfig {
    /// A single ring over `devices` with every other setting at its default.
    pub fn single_ring(devices: &[&str], duration_ms: u64) -> Self {
        let ids: Vec<DeviceId> = devices.iter().map(|d| DeviceId::from(*d)).collect();
        SimConfig {
            seed: 0,
            duration_ms,
            max_rounds: None,
            latency: LatencyModel::default(),
            dwell_us: 0,
            t_diff_us: default_t_diff(),
            solve_mode: SolveMode::Modeled,
            prime_bits: default_prime_bits(),
            validity_ms: None,
            hub_stagger_us: default_stagger(),
            devices: Vec::new(),
            rings: vec![RingSpec::new("ring0", ids)],
            orders: Vec::new(),
            uploads: Vec::new(),
            churn: Vec::new(),
        }
    }

    /// Parses a JSON config, reporting the line and column of syntax and
    /// field errors.
    pub fn from_json(text: &str) -> Result<Self, NetsimError> {
        serde_json::from_str(text).map_err(|e| {
            NetsimError::Config(format!("line {} column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn device_spec(&self, id: &DeviceId) -> DeviceSpec {
        self.devices
            .iter()
            .find(|d| &d.id == id)
            .cloned()
            .unwrap_or_else(|| DeviceSpec::new(id.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_model_arithmetic() {
        let model = LatencyModel {
            alpha_us: 2000,
            beta_us_per_byte: 0.05,
            jitter_us: 0,
        };
        assert_eq!(model.base_us(1000), 2050);
        assert_eq!(model.sample_us(1000, 9), 2050);
        let jittered = LatencyModel { jitter_us: 100, ..model };
        let a = jittered.sample_us(1000, 9);
        assert_eq!(a, jittered.sample_us(1000, 9));
        assert!((2050..=2150).contains(&a));
        assert_eq!(jittered.worst_us(1000), 2150);
    }

    #[test]
    fn config_defaults_and_errors() {
        let cfg = SimConfig::from_json(r#"{"duration_ms": 5000, "rings": [{"ring_id": "A", "devices": ["D1", "D2"]}]}"#)
            .unwrap();
        assert_eq!(cfg.latency, LatencyModel::default());
        assert_eq!(cfg.rings[0].topology, Topology::Ring);
        assert_eq!(cfg.device_spec(&"D1".into()).squarings_per_sec, 1e6);
        let err = SimConfig::from_json("{\n  \"duration_ms\": \"x\"\n}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(SimConfig::from_json(r#"{"duration_ms": 1, "rings": [], "bogus": 1}"#).is_err());
        let round_trip = SimConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(round_trip, cfg);
    }

    #[test]
    fn random_period_bounds() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let period = TokenPeriod::Random { slot_us: 1000 };
        for _ in 0..200 {
            assert!((500..=1500).contains(&period.gap_us(&mut rng)));
        }
        assert_eq!(TokenPeriod::Fixed { slot_us: 7 }.gap_us(&mut rng), 7);
    }
}
