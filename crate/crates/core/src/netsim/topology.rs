use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{DeviceKind, DeviceProfile, LatencyModel, NetsimError, RingSpec, TokenPeriod, Topology};
use crate::command::DeviceId;
use crate::crypto;
use crate::token::{partition_data_field, DataLayout, RingKey, TokenLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Hub,
    /// Position in the ring's device list.
    Device(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hop {
    pub from: Node,
    pub to: Node,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capacities {
    pub command: usize,
    /// Sub-field size per device, in ring order.
    pub sub_fields: Vec<usize>,
}

impl Capacities {
    pub fn uniform(command: usize, sub_field: usize, devices: usize) -> Self {
        Capacities {
            command,
            sub_fields: vec![sub_field; devices],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingConfig {
    pub ring_id: String,
    pub devices: Vec<DeviceId>,
    pub topology: Topology,
    pub period: TokenPeriod,
    pub command_capacity: usize,
    /// One sub-field per device, in ring order.
    pub data_layout: DataLayout,
    pub counter: u32,
    pub key: RingKey,
}

pub fn build_ring(
    ring_id: &str,
    devices: &[DeviceId],
    topology: Topology,
    capacities: &Capacities,
    seed: u64,
) -> Result<RingConfig, NetsimError> {
    if devices.is_empty() {
        return Err(NetsimError::Config(format!("ring {ring_id} has no devices")));
    }
    if devices.len() > u16::MAX as usize {
        return Err(NetsimError::Config(format!("ring {ring_id} has too many devices")));
    }
    let unique: BTreeSet<&DeviceId> = devices.iter().collect();
    if unique.len() != devices.len() {
        return Err(NetsimError::Config(format!("ring {ring_id} lists a device twice")));
    }
    if capacities.sub_fields.len() != devices.len() {
        return Err(NetsimError::Config(format!(
            "ring {ring_id}: {} sub-field sizes for {} devices",
            capacities.sub_fields.len(),
            devices.len()
        )));
    }
    let requests: Vec<(usize, usize)> = capacities.sub_fields.iter().copied().enumerate().collect();
    let capacity = capacities.sub_fields.iter().sum();
    let partition = partition_data_field(capacity, &requests);
    debug_assert!(partition.deferred.is_empty());
    let key = crypto::kdf(&crypto::sha256(&[b"ring key", &seed.to_be_bytes(), ring_id.as_bytes()]));
    Ok(RingConfig {
        ring_id: ring_id.to_string(),
        devices: devices.to_vec(),
        topology,
        period: TokenPeriod::default(),
        command_capacity: capacities.command,
        data_layout: partition.layout,
        counter: devices.len() as u32,
        key,
    })
}

impl RingConfig {
    pub fn token_layout(&self) -> TokenLayout {
        TokenLayout {
            command_capacity: self.command_capacity,
            data_capacity: self.data_layout.capacity,
            device_count: self.devices.len() as u16,
        }
    }

    pub fn sealed_len(&self) -> usize {
        self.token_layout().sealed_len()
    }

    pub fn index_of(&self, device: &DeviceId) -> Option<usize> {
        self.devices.iter().position(|d| d == device)
    }

    pub fn address(&self, node: Node) -> &str {
        match node {
            Node::Hub => super::HUB,
            Node::Device(i) => self.devices[i].as_str(),
        }
    }

    /// Device visits of one round, in order.
    pub fn visits(&self) -> Vec<usize> {
        (0..self.counter as usize).map(|v| v % self.devices.len()).collect()
    }

    /// Every transmission of one round.
    pub fn path(&self) -> Vec<Hop> {
        let visits = self.visits();
        let mut hops = Vec::new();
        match self.topology {
            Topology::Ring => {
                let mut from = Node::Hub;
                for &v in &visits {
                    hops.push(Hop {
                        from,
                        to: Node::Device(v),
                    });
                    from = Node::Device(v);
                }
                hops.push(Hop { from, to: Node::Hub });
            }
            Topology::Flower => {
                for &v in &visits {
                    hops.push(Hop {
                        from: Node::Hub,
                        to: Node::Device(v),
                    });
                    hops.push(Hop {
                        from: Node::Device(v),
                        to: Node::Hub,
                    });
                }
            }
        }
        hops
    }

    /// Predicted forward instant of each device's first visit, relative to
    /// the round's start, assuming no jitter.
    pub fn forward_offsets(&self, latency: &LatencyModel, dwell_us: u64) -> Vec<(DeviceId, u64)> {
        let hop = latency.base_us(self.sealed_len());
        let mut now = 0;
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for step in self.path() {
            now += hop;
            if let Node::Device(i) = step.to {
                now += dwell_us;
                if seen.insert(i) {
                    out.push((self.devices[i].clone(), now));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    Peak,
    NonPeak,
}

/// One ring produced by [`partition_rings`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingPlan {
    pub ring_id: String,
    pub devices: Vec<DeviceId>,
    pub comparable: bool,
    /// Whether the ring circulates during this load period.
    pub active: bool,
}

impl RingPlan {
    pub fn to_spec(&self) -> RingSpec {
        RingSpec::new(self.ring_id.clone(), self.devices.clone())
    }
}

/// Splits devices into comparable and incomparable rings.
///
/// A device is comparable when its `gamma` is non-empty or another device
/// lists it. Peak mode places comparable devices round-robin into `x` rings
/// with only the first active, plus one ring of all incomparable devices.
/// Non-peak mode spreads incomparable devices round-robin over up to `x`
/// rings and keeps comparable devices together in one ring.
pub fn partition_rings(
    profiles: &BTreeMap<DeviceId, DeviceProfile>,
    x: usize,
    mode: LoadMode,
) -> Result<Vec<RingPlan>, NetsimError> {
    if profiles.is_empty() {
        return Err(NetsimError::Partition("no device profiles".into()));
    }
    if x == 0 {
        return Err(NetsimError::Partition("ring count must be at least 1".into()));
    }
    let mut comparable = BTreeSet::new();
    for (id, profile) in profiles {
        if profile.gamma.contains(id) {
            return Err(NetsimError::Partition(format!("{id} lists itself as a predecessor")));
        }
        for pred in &profile.gamma {
            if !profiles.contains_key(pred) {
                return Err(NetsimError::Registry(pred.clone()));
            }
            comparable.insert(pred.clone());
        }
        if !profile.gamma.is_empty() {
            comparable.insert(id.clone());
        }
    }
    let incomparable: Vec<DeviceId> = profiles.keys().filter(|d| !comparable.contains(*d)).cloned().collect();
    let comparable: Vec<DeviceId> = comparable.into_iter().collect();
    if !comparable.is_empty() && x > comparable.len() {
        return Err(NetsimError::Partition(format!(
            "{x} rings requested for {} comparable devices",
            comparable.len()
        )));
    }

    let round_robin = |devices: &[DeviceId], rings: usize| -> Vec<Vec<DeviceId>> {
        let mut out = vec![Vec::new(); rings];
        for (i, d) in devices.iter().enumerate() {
            out[i % rings].push(d.clone());
        }
        out.retain(|r| !r.is_empty());
        out
    };

    let mut plans = Vec::new();
    match mode {
        LoadMode::Peak => {
            for (i, devices) in round_robin(&comparable, x).into_iter().enumerate() {
                plans.push(RingPlan {
                    ring_id: format!("C{i}"),
                    devices,
                    comparable: true,
                    active: i == 0,
                });
            }
            if !incomparable.is_empty() {
                plans.push(RingPlan {
                    ring_id: "I0".into(),
                    devices: incomparable,
                    comparable: false,
                    active: true,
                });
            }
        }
        LoadMode::NonPeak => {
            if !comparable.is_empty() {
                plans.push(RingPlan {
                    ring_id: "C0".into(),
                    devices: comparable,
                    comparable: true,
                    active: true,
                });
            }
            for (i, devices) in round_robin(&incomparable, x).into_iter().enumerate() {
                plans.push(RingPlan {
                    ring_id: format!("I{i}"),
                    devices,
                    comparable: false,
                    active: true,
                });
            }
        }
    }
    Ok(plans)
}

/// `ceil(n * ratio)`, and at least one device whenever `ratio > 0`.
pub fn skew_count(devices: usize, ratio: f64) -> usize {
    if ratio <= 0.0 {
        return 0;
    }
    ((devices as f64 * ratio).ceil() as usize).clamp(1, devices)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkewPartition {
    pub non_skew: Vec<RingSpec>,
    pub skew: Vec<RingSpec>,
}

/// Non-skew devices share one ring with 1 KB sub-fields; skew devices share
/// a separate ring with 1 MB sub-fields.
pub fn partition_by_skew(devices: &[(DeviceId, DeviceKind)]) -> SkewPartition {
    let pick = |kind: DeviceKind| -> Vec<DeviceId> {
        devices.iter().filter(|(_, k)| *k == kind).map(|(d, _)| d.clone()).collect()
    };
    let ring = |id: &str, members: Vec<DeviceId>, kind: DeviceKind| -> Vec<RingSpec> {
        if members.is_empty() {
            return Vec::new();
        }
        let mut spec = RingSpec::new(id, members);
        spec.sub_field_bytes = Some(kind.default_sub_field());
        vec![spec]
    };
    SkewPartition {
        non_skew: ring("non_skew", pick(DeviceKind::NonSkew), DeviceKind::NonSkew),
        skew: ring("skew", pick(DeviceKind::Skew), DeviceKind::Skew),
    }
}
