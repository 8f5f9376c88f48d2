use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use num_bigint::BigUint;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::topology::{build_ring, Capacities, Node, RingConfig};
use super::verify::{OwnerOrder, OwnerState};
use super::{NetsimError, SimConfig, SolveMode, Topology};
use crate::command::{DeviceId, SwitchState};
use crate::crypto;
use crate::identity::Identity;
use crate::observer::ChannelEvent;
use crate::schedule::{
    assign_delays, check_order, create_order, sign_order, DeviceRegistry, RegisteredDevice, Schedule, SignedOrder,
};
use crate::timelock::{self, param_gen, Puzzle, PuzzleParams, SolveReceipt};
use crate::token::{
    command_frame_len, load_commands, open, overwrite_data, recover_data, seal, toggle_request, PadLedger, SealedToken,
    Token,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChurnEvent {
    Leave,
    Join,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopTiming {
    pub device: DeviceId,
    pub t_rcv_us: u64,
    pub t_fwd_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub ring_id: String,
    pub round: u64,
    pub token_id: u64,
    pub t_beg_us: u64,
    pub t_end_us: u64,
    /// One entry per device visit, in order.
    pub hops: Vec<HopTiming>,
    pub t_sum_us: u64,
    pub sealed_len: usize,
    /// Responses synthesized by the hub for absent devices.
    pub phantoms: u32,
}

impl RoundTrace {
    pub fn latency_us(&self) -> u64 {
        self.t_end_us - self.t_beg_us
    }
}

/// One command execution as reported by the device, on its own clock.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub token_id: u64,
    pub device: DeviceId,
    pub state: SwitchState,
    pub t_com_us: i64,
    #[serde(with = "crate::timelock::biguint_hex")]
    pub solution: BigUint,
    pub squarings: u64,
}

/// The hub's note of which round carried which order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub order_id: usize,
    pub ring_id: String,
    pub token_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExecutionLog {
    pub deliveries: Vec<Delivery>,
    pub records: Vec<ExecutionRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stall {
    pub ring_id: String,
    pub token_id: u64,
    pub device: DeviceId,
    pub time_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveredUpload {
    pub ring_id: String,
    pub token_id: u64,
    pub device: DeviceId,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedJoin {
    pub device: DeviceId,
    pub time_us: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Virtual time covered by the run: the configured duration, or the end
    /// of the last round if that is later.
    pub duration_us: u64,
    pub rings: Vec<RingConfig>,
    pub rounds: Vec<RoundTrace>,
    pub events: Vec<ChannelEvent>,
    pub log: ExecutionLog,
    pub owner: OwnerState,
    pub orders: Vec<SignedOrder>,
    pub stalls: Vec<Stall>,
    pub uploads: Vec<RecoveredUpload>,
    pub rejected_orders: Vec<usize>,
    pub rejected_joins: Vec<RejectedJoin>,
    /// `(device, time)` at which the hub first declared a device absent.
    pub detections: Vec<(DeviceId, u64)>,
    /// Uploads the config requested, by device, in request order.
    pub requested_uploads: Vec<(DeviceId, Vec<u8>)>,
}

impl SimOutput {
    pub fn rounds_for(&self, ring_id: &str) -> impl Iterator<Item = &RoundTrace> {
        let ring_id = ring_id.to_string();
        self.rounds.iter().filter(move |r| r.ring_id == ring_id)
    }
}

enum Event {
    Originate { ring: usize },
    Arrive { ring: usize, to: Node, from: Node, phantom: bool },
    Watchdog { ring: usize, device: usize, token_id: u64 },
    EmitPhantom { ring: usize, device: usize, token_id: u64 },
    PuzzleDone { device: usize, token_id: u64, receipt: SolveReceipt },
    OrderIssued { order: usize },
    Upload { device: usize, payload: Vec<u8> },
    Churn { device: usize, event: ChurnEvent, forged: bool },
}

struct Scheduled {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct DeviceState {
    id: DeviceId,
    identity: Identity,
    ring: usize,
    index: usize,
    squarings_per_sec: f64,
    clock_offset_us: i64,
    present: bool,
    last_token: Option<u64>,
    uploads: VecDeque<Vec<u8>>,
    requested_in: Option<u64>,
}

struct ActiveRound {
    index: u64,
    token_id: u64,
    beg: u64,
    hops: Vec<HopTiming>,
    hops_sent: u64,
    grants: Vec<usize>,
    phantoms: u32,
    awaiting: Option<usize>,
}

struct RingState {
    cfg: RingConfig,
    members: Vec<usize>,
    sealed: Option<SealedToken>,
    round: Option<ActiveRound>,
    rounds_started: u64,
    grants: Vec<usize>,
    ledger: PadLedger,
    pending: VecDeque<usize>,
    stalled: bool,
    absent: BTreeSet<usize>,
}

pub struct Simulation {
    config: SimConfig,
    params: PuzzleParams,
    owner: Identity,
    rings: Vec<RingState>,
    devices: Vec<DeviceState>,
    by_id: BTreeMap<DeviceId, usize>,
    registry: DeviceRegistry,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    rng: ChaCha20Rng,
    period_rng: ChaCha20Rng,
    workload_rng: ChaCha20Rng,
    owner_state: OwnerState,
    signed_orders: Vec<SignedOrder>,
    rounds: Vec<RoundTrace>,
    events: Vec<ChannelEvent>,
    log: ExecutionLog,
    stalls: Vec<Stall>,
    uploads: Vec<RecoveredUpload>,
    rejected_orders: Vec<usize>,
    rejected_joins: Vec<RejectedJoin>,
    detections: Vec<(DeviceId, u64)>,
    requested_uploads: Vec<(DeviceId, Vec<u8>)>,
}

/// Builds and runs a simulation from its config.
pub fn run(config: &SimConfig) -> Result<SimOutput, NetsimError> {
    Ok(Simulation::new(config.clone())?.run())
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, NetsimError> {
        if config.rings.is_empty() {
            return Err(NetsimError::Config("at least one ring is required".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let params = param_gen(config.prime_bits, config.seed)?;
        let owner = Identity::generate("owner", &mut rng);

        let mut by_id = BTreeMap::new();
        for spec in &config.devices {
            if by_id.insert(spec.id.clone(), usize::MAX).is_some() {
                return Err(NetsimError::Config(format!("device {} specified twice", spec.id)));
            }
        }
        let known_specs: BTreeSet<DeviceId> = by_id.keys().cloned().collect();
        by_id.clear();

        let t_diff = config.t_diff_us as i64;
        let mut rings = Vec::new();
        let mut devices: Vec<DeviceState> = Vec::new();
        let mut registry = DeviceRegistry::new();
        for (r, spec) in config.rings.iter().enumerate() {
            let mut members = Vec::new();
            let mut sub_fields = Vec::new();
            for (index, id) in spec.devices.iter().enumerate() {
                if by_id.contains_key(id) {
                    return Err(NetsimError::Config(format!("device {id} appears in more than one ring")));
                }
                let dev = config.device_spec(id);
                if dev.squarings_per_sec <= 0.0 || !dev.squarings_per_sec.is_finite() {
                    return Err(NetsimError::Config(format!("device {id}: squarings_per_sec must be positive")));
                }
                if dev.profile.gamma.contains(id) {
                    return Err(NetsimError::Config(format!("device {id} lists itself in gamma")));
                }
                let clock_offset_us = match dev.clock_offset_us {
                    Some(offset) if offset.abs() > t_diff => {
                        return Err(NetsimError::Config(format!(
                            "device {id}: clock offset {offset} exceeds t_diff {t_diff}"
                        )))
                    }
                    Some(offset) => offset,
                    None => rng.gen_range(-t_diff..=t_diff),
                };
                let identity = Identity::generate(id.as_str(), &mut rng);
                registry.insert(
                    id.clone(),
                    RegisteredDevice {
                        identity: identity.public(),
                        squarings_per_sec: dev.squarings_per_sec,
                    },
                );
                sub_fields.push(spec.sub_field_bytes.unwrap_or(dev.kind.default_sub_field()));
                by_id.insert(id.clone(), devices.len());
                members.push(devices.len());
                devices.push(DeviceState {
                    id: id.clone(),
                    identity,
                    ring: r,
                    index,
                    squarings_per_sec: dev.squarings_per_sec,
                    clock_offset_us,
                    present: true,
                    last_token: None,
                    uploads: VecDeque::new(),
                    requested_in: None,
                });
            }
            let capacities = Capacities {
                command: spec.command_capacity,
                sub_fields,
            };
            let mut cfg = build_ring(&spec.ring_id, &spec.devices, spec.topology, &capacities, config.seed)?;
            cfg.period = spec.period;
            cfg.counter = spec.counter.unwrap_or(cfg.counter);
            if cfg.counter == 0 {
                return Err(NetsimError::Config(format!("ring {}: counter must be positive", spec.ring_id)));
            }
            rings.push(RingState {
                cfg,
                members,
                sealed: None,
                round: None,
                rounds_started: 0,
                grants: Vec::new(),
                ledger: PadLedger::new(),
                pending: VecDeque::new(),
                stalled: false,
                absent: BTreeSet::new(),
            });
        }
        if let Some(extra) = known_specs.iter().find(|id| !by_id.contains_key(*id)) {
            return Err(NetsimError::Config(format!("device {extra} is specified but not in any ring")));
        }
        let ring_ids: BTreeSet<&str> = rings.iter().map(|r| r.cfg.ring_id.as_str()).collect();
        if ring_ids.len() != rings.len() {
            return Err(NetsimError::Config("ring ids must be unique".into()));
        }

        let owner_state = OwnerState {
            trapdoor: params.trapdoor(),
            orders: Vec::new(),
        };
        let mut sim = Simulation {
            period_rng: ChaCha20Rng::seed_from_u64(config.seed ^ 0x7065_7269_6f64),
            workload_rng: ChaCha20Rng::seed_from_u64(config.seed ^ 0x776f_726b),
            config,
            params,
            owner,
            rings,
            devices,
            by_id,
            registry,
            queue: BinaryHeap::new(),
            seq: 0,
            rng,
            owner_state,
            signed_orders: Vec::new(),
            rounds: Vec::new(),
            events: Vec::new(),
            log: ExecutionLog::default(),
            stalls: Vec::new(),
            uploads: Vec::new(),
            rejected_orders: Vec::new(),
            rejected_joins: Vec::new(),
            detections: Vec::new(),
            requested_uploads: Vec::new(),
        };
        for ring in 0..sim.rings.len() {
            let at = ring as u64 * sim.config.hub_stagger_us;
            sim.push(at, Event::Originate { ring });
        }
        for order in sim.config.orders.clone() {
            let schedule = Schedule::try_from(order.schedule)?;
            sim.issue_order(order.at_ms * 1000, schedule)?;
        }
        for upload in sim.config.uploads.clone() {
            let mut payload = vec![0u8; upload.bytes];
            sim.workload_rng.fill_bytes(&mut payload);
            sim.request_upload(&upload.device, upload.at_ms * 1000, payload)?;
        }
        for churn in sim.config.churn.clone() {
            sim.schedule_churn(&churn.device, churn.event, churn.at_ms * 1000, churn.forged)?;
        }
        Ok(sim)
    }

    pub fn ring_configs(&self) -> Vec<RingConfig> {
        self.rings.iter().map(|r| r.cfg.clone()).collect()
    }

    pub fn params(&self) -> &PuzzleParams {
        &self.params
    }

    fn push(&mut self, time: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled {
            time,
            seq: self.seq,
            event,
        });
    }

    fn device(&self, id: &DeviceId) -> Result<usize, NetsimError> {
        self.by_id.get(id).copied().ok_or_else(|| NetsimError::Registry(id.clone()))
    }

    /// The owner builds, signs and sends an order at `at_us`. All devices of
    /// the schedule must belong to one ring. Returns the order id.
    pub fn issue_order(&mut self, at_us: u64, schedule: Schedule) -> Result<usize, NetsimError> {
        let members = schedule
            .devices()
            .iter()
            .map(|d| self.device(d))
            .collect::<Result<Vec<_>, _>>()?;
        let ring = match members.first() {
            Some(&m) => self.devices[m].ring,
            None => return Err(NetsimError::Config("order has no commands".into())),
        };
        if members.iter().any(|&m| self.devices[m].ring != ring) {
            return Err(NetsimError::Config("an order must address devices of a single ring".into()));
        }
        let cfg = &self.rings[ring].cfg;
        let hop_times = cfg.forward_offsets(&self.config.latency, self.config.dwell_us);
        let delays = assign_delays(&schedule, &hop_times)?;
        let t_val = self
            .config
            .validity_ms
            .map(|v| at_us / 1000 + v)
            .unwrap_or(u64::MAX);
        let created = create_order(&schedule, &self.registry, &self.params, &delays, t_val, &mut self.rng)?;
        let needed = command_frame_len(&created.commands);
        if needed > cfg.command_capacity {
            return Err(NetsimError::Config(format!(
                "order needs {needed} command bytes but ring {} has {}",
                cfg.ring_id, cfg.command_capacity
            )));
        }
        let order_id = self.signed_orders.len();
        self.owner_state.orders.push(OwnerOrder {
            order_id,
            ring_id: cfg.ring_id.clone(),
            issued_at_us: at_us,
            schedule,
            t_hats: created.t_hats,
            delays_us: delays,
        });
        let signed = sign_order(&self.owner, super::HUB, created.commands);
        self.signed_orders.push(signed);
        self.push(at_us, Event::OrderIssued { order: order_id });
        Ok(order_id)
    }

    /// Replaces the signed form of an order before it reaches the hub.
    pub fn tamper_order(&mut self, order_id: usize, f: impl FnOnce(&mut SignedOrder)) {
        f(&mut self.signed_orders[order_id]);
    }

    pub fn request_upload(&mut self, device: &DeviceId, at_us: u64, payload: Vec<u8>) -> Result<(), NetsimError> {
        let d = self.device(device)?;
        let ring = &self.rings[self.devices[d].ring].cfg;
        let size = ring.data_layout.sub_fields[self.devices[d].index].size;
        if payload.len() > crate::token::max_payload(size) {
            return Err(NetsimError::Config(format!(
                "upload of {} bytes does not fit the {size}-byte sub-field of {device}",
                payload.len()
            )));
        }
        self.requested_uploads.push((device.clone(), payload.clone()));
        self.push(at_us, Event::Upload { device: d, payload });
        Ok(())
    }

    /// Schedules a device departure or return.
    pub fn churn(&mut self, device: &DeviceId, event: ChurnEvent, at_us: u64) -> Result<(), NetsimError> {
        self.schedule_churn(device, event, at_us, false)
    }

    fn schedule_churn(&mut self, device: &DeviceId, event: ChurnEvent, at_us: u64, forged: bool) -> Result<(), NetsimError> {
        let d = self.device(device)?;
        self.push(at_us, Event::Churn { device: d, event, forged });
        Ok(())
    }

    pub fn run(mut self) -> SimOutput {
        while let Some(Scheduled { time, event, .. }) = self.queue.pop() {
            self.handle(time, event);
        }
        let mut events = std::mem::take(&mut self.events);
        events.sort_by_key(|e| e.time_us);
        let last = self.rounds.iter().map(|r| r.t_end_us).max().unwrap_or(0);
        SimOutput {
            duration_us: (self.config.duration_ms * 1000).max(last),
            rings: self.ring_configs(),
            rounds: self.rounds,
            events,
            log: self.log,
            owner: self.owner_state,
            orders: self.signed_orders,
            stalls: self.stalls,
            uploads: self.uploads,
            rejected_orders: self.rejected_orders,
            rejected_joins: self.rejected_joins,
            detections: self.detections,
            requested_uploads: self.requested_uploads,
        }
    }

    fn handle(&mut self, now: u64, event: Event) {
        match event {
            Event::Originate { ring } => self.originate(ring, now),
            Event::Arrive { ring, to: Node::Device(i), .. } => self.device_receive(ring, i, now),
            Event::Arrive { ring, to: Node::Hub, from, phantom } => self.hub_receive(ring, from, phantom, now),
            Event::Watchdog { ring, device, token_id } => self.watchdog(ring, device, token_id, now),
            Event::EmitPhantom { ring, device, token_id } => {
                if self.current_token(ring) == Some(token_id) {
                    self.emit_phantom(ring, device, now);
                }
            }
            Event::PuzzleDone { device, token_id, receipt } => {
                let dev = &self.devices[device];
                self.log.records.push(ExecutionRecord {
                    token_id,
                    device: dev.id.clone(),
                    state: receipt.command.state,
                    t_com_us: now as i64 + dev.clock_offset_us,
                    solution: receipt.solution,
                    squarings: receipt.squarings_performed,
                });
            }
            Event::OrderIssued { order } => {
                let ring_id = self.owner_state.orders[order].ring_id.clone();
                match check_order(&self.signed_orders[order], &self.owner.public()) {
                    Ok(()) => {
                        let ring = self.rings.iter().position(|r| r.cfg.ring_id == ring_id).expect("ring exists");
                        self.rings[ring].pending.push_back(order);
                    }
                    Err(_) => self.rejected_orders.push(order),
                }
            }
            Event::Upload { device, payload } => self.devices[device].uploads.push_back(payload),
            Event::Churn { device, event, forged } => self.apply_churn(device, event, forged, now),
        }
    }

    fn current_token(&self, ring: usize) -> Option<u64> {
        self.rings[ring].round.as_ref().map(|r| r.token_id)
    }

    fn hop_key(&self, ring: usize, round: u64, hop: u64) -> u64 {
        let digest = crypto::sha256(&[
            b"hop",
            &self.config.seed.to_be_bytes(),
            &(ring as u64).to_be_bytes(),
            &round.to_be_bytes(),
            &hop.to_be_bytes(),
        ]);
        u64::from_be_bytes(digest[..8].try_into().unwrap())
    }

    /// Transmits the ring's current token from `from` to `to` at `at`.
    fn send(&mut self, ring: usize, from: Node, to: Node, at: u64, phantom: bool) {
        let (index, hop) = {
            let round = self.rings[ring].round.as_mut().expect("active round");
            round.hops_sent += 1;
            (round.index, round.hops_sent)
        };
        let bytes = self.rings[ring].cfg.sealed_len();
        let latency = self.config.latency.sample_us(bytes, self.hop_key(ring, index, hop));
        let cfg = &self.rings[ring].cfg;
        let topology = cfg.topology;
        self.events.push(ChannelEvent {
            time_us: at,
            sender: cfg.address(from).to_string(),
            receiver: cfg.address(to).to_string(),
            bytes,
        });
        self.push(at + latency, Event::Arrive { ring, to, from, phantom });

        if let (Topology::Flower, Node::Hub, Node::Device(i)) = (topology, from, to) {
            let token_id = self.current_token(ring).expect("active round");
            if self.rings[ring].absent.contains(&i) {
                self.push(at + latency + self.config.dwell_us, Event::EmitPhantom { ring, device: i, token_id });
            } else {
                let rtt = 2 * self.config.latency.worst_us(bytes) + self.config.dwell_us;
                self.rings[ring].round.as_mut().unwrap().awaiting = Some(i);
                self.push(at + 2 * rtt, Event::Watchdog { ring, device: i, token_id });
            }
        }
    }

    fn originate(&mut self, ring: usize, now: u64) {
        let duration_us = self.config.duration_ms * 1000;
        let state = &self.rings[ring];
        if state.stalled || state.round.is_some() || now >= duration_us {
            return;
        }
        if self.config.max_rounds.is_some_and(|m| state.rounds_started >= m) {
            return;
        }
        let layout = state.cfg.token_layout();
        let token_id = self.rng.next_u64();
        let fresh = Token::fresh(&layout, token_id, state.cfg.counter, &mut self.rng);
        let state = &mut self.rings[ring];
        let refilled = state.ledger.refill(&fresh, &state.cfg.data_layout, &mut self.rng);
        let order = state.pending.pop_front();
        let commands = order.map(|o| &self.signed_orders[o].commands);
        let token = load_commands(&refilled, commands, &mut self.rng).expect("order size checked when issued");
        if let Some(order_id) = order {
            self.log.deliveries.push(Delivery {
                order_id,
                ring_id: state.cfg.ring_id.clone(),
                token_id,
            });
        }
        state.sealed = Some(seal(&token, &state.cfg.key, &mut self.rng));
        state.round = Some(ActiveRound {
            index: state.rounds_started,
            token_id,
            beg: now,
            hops: Vec::new(),
            hops_sent: 0,
            grants: std::mem::take(&mut state.grants),
            phantoms: 0,
            awaiting: None,
        });
        state.rounds_started += 1;
        let first = state.cfg.visits()[0];
        self.send(ring, Node::Hub, Node::Device(first), now, false);
    }

    fn open_current(&self, ring: usize) -> Token {
        let state = &self.rings[ring];
        open(state.sealed.as_ref().expect("token in flight"), &state.cfg.key).expect("ring tokens authenticate")
    }

    fn reseal(&mut self, ring: usize, token: &Token) {
        let key = self.rings[ring].cfg.key;
        self.rings[ring].sealed = Some(seal(token, &key, &mut self.rng));
    }

    fn device_receive(&mut self, ring: usize, i: usize, now: u64) {
        let d = self.rings[ring].members[i];
        if self.rings[ring].round.is_none() {
            return;
        }
        if !self.devices[d].present {
            if self.rings[ring].cfg.topology == Topology::Ring {
                let state = &mut self.rings[ring];
                let round = state.round.take().expect("active round");
                state.sealed = None;
                state.stalled = true;
                state.ledger.discard_round(round.token_id);
                self.stalls.push(Stall {
                    ring_id: state.cfg.ring_id.clone(),
                    token_id: round.token_id,
                    device: self.devices[d].id.clone(),
                    time_us: now,
                });
            }
            return;
        }

        let mut token = self.open_current(ring);
        let token_id = token.token_id;
        let mut puzzle = None;
        if self.devices[d].last_token != Some(token_id) {
            self.devices[d].last_token = Some(token_id);
            let dev = &self.devices[d];
            if let Some(entry) = token.commands().and_then(|c| c.entry_for(&dev.id).cloned()) {
                let local_ms = (now as i64 + dev.clock_offset_us).max(0) as u64 / 1000;
                puzzle = dev
                    .identity
                    .decrypt(&entry.blob)
                    .ok()
                    .and_then(|bytes| Puzzle::from_bytes(&bytes).ok())
                    .filter(|p| timelock::check_validity(p.t_val, local_ms, self.config.t_diff_us / 1000));
            }
            if let Some(requested) = self.devices[d].requested_in {
                if requested != token_id {
                    let payload = self.devices[d].uploads.pop_front().unwrap_or_default();
                    let layout = &self.rings[ring].cfg.data_layout;
                    token = overwrite_data(&token, layout, i, &payload, &mut self.rng).expect("payload size checked");
                    self.devices[d].requested_in = None;
                }
            }
            if self.devices[d].requested_in.is_none() && !self.devices[d].uploads.is_empty() {
                token = toggle_request(&token, i).expect("device index within ring");
                self.devices[d].requested_in = Some(token_id);
            }
        }
        token.counter = token.counter.saturating_sub(1);
        let counter = token.counter;
        self.reseal(ring, &token);

        let t_fwd = now + self.config.dwell_us;
        let state = &mut self.rings[ring];
        state.round.as_mut().unwrap().hops.push(HopTiming {
            device: self.devices[d].id.clone(),
            t_rcv_us: now,
            t_fwd_us: t_fwd,
        });
        let next = match state.cfg.topology {
            Topology::Flower => Node::Hub,
            Topology::Ring if counter == 0 => Node::Hub,
            Topology::Ring => Node::Device((i + 1) % state.cfg.devices.len()),
        };
        self.send(ring, Node::Device(i), next, t_fwd, false);

        if let Some(puzzle) = puzzle {
            let receipt = match self.config.solve_mode {
                SolveMode::Real => puzzle.solve(),
                SolveMode::Modeled => puzzle.open_with(&self.params.trapdoor().fast_eval(puzzle.t_hat), puzzle.t_hat),
            };
            if let Some(receipt) = receipt.ok().filter(|r| r.command.device_id == self.devices[d].id) {
                let done = t_fwd + timelock::solve_duration_us(self.devices[d].squarings_per_sec, puzzle.t_hat);
                self.push(done, Event::PuzzleDone { device: d, token_id, receipt });
            }
        }
    }

    fn watchdog(&mut self, ring: usize, device: usize, token_id: u64, now: u64) {
        let state = &mut self.rings[ring];
        let Some(round) = state.round.as_mut() else { return };
        if round.token_id != token_id || round.awaiting != Some(device) {
            return;
        }
        round.awaiting = None;
        state.absent.insert(device);
        let id = self.devices[state.members[device]].id.clone();
        self.detections.push((id, now));
        self.emit_phantom(ring, device, now);
    }

    /// The hub transmits a token response in the absent device's name.
    fn emit_phantom(&mut self, ring: usize, device: usize, now: u64) {
        let mut token = self.open_current(ring);
        token.counter = token.counter.saturating_sub(1);
        self.reseal(ring, &token);
        self.rings[ring].round.as_mut().unwrap().phantoms += 1;
        self.send(ring, Node::Device(device), Node::Hub, now, true);
    }

    fn hub_receive(&mut self, ring: usize, from: Node, _phantom: bool, now: u64) {
        if self.rings[ring].round.is_none() {
            return;
        }
        let token = self.open_current(ring);
        let state = &mut self.rings[ring];
        if state.cfg.topology == Topology::Flower {
            state.round.as_mut().unwrap().awaiting = None;
            if token.counter > 0 {
                let Node::Device(i) = from else { unreachable!("hub does not send to itself") };
                let next = (i + 1) % state.cfg.devices.len();
                self.reseal(ring, &token);
                self.send(ring, Node::Hub, Node::Device(next), now, false);
                return;
            }
        }
        self.end_round(ring, token, now);
    }

    fn end_round(&mut self, ring: usize, token: Token, now: u64) {
        let state = &mut self.rings[ring];
        let round = state.round.take().expect("active round");
        state.sealed = None;
        for (k, field) in state.cfg.data_layout.sub_fields.iter().enumerate() {
            if !round.grants.contains(&field.device_index) {
                continue;
            }
            if let Ok(payload) = recover_data(&mut state.ledger, &token, &state.cfg.data_layout, k) {
                if !payload.is_empty() {
                    self.uploads.push(RecoveredUpload {
                        ring_id: state.cfg.ring_id.clone(),
                        token_id: round.token_id,
                        device: state.cfg.devices[field.device_index].clone(),
                        payload,
                    });
                }
            }
        }
        state.ledger.discard_round(round.token_id);
        state.grants = token.toggle_bits.set_indices();
        let dwell: u64 = round.hops.iter().map(|h| h.t_fwd_us - h.t_rcv_us).sum();
        self.rounds.push(RoundTrace {
            ring_id: state.cfg.ring_id.clone(),
            round: round.index,
            token_id: round.token_id,
            t_beg_us: round.beg,
            t_end_us: now,
            t_sum_us: (now - round.beg) - dwell,
            hops: round.hops,
            sealed_len: state.cfg.sealed_len(),
            phantoms: round.phantoms,
        });
        let gap = state.cfg.period.gap_us(&mut self.period_rng);
        let next = (round.beg + gap).max(now);
        self.push(next, Event::Originate { ring });
    }

    fn apply_churn(&mut self, device: usize, event: ChurnEvent, forged: bool, now: u64) {
        match event {
            ChurnEvent::Leave => self.devices[device].present = false,
            ChurnEvent::Join => {
                let dev = &self.devices[device];
                let mut message = b"join".to_vec();
                message.extend_from_slice(dev.id.as_str().as_bytes());
                message.extend_from_slice(&now.to_be_bytes());
                let signature = if forged {
                    Identity::generate(dev.id.as_str(), &mut self.rng).sign(&message)
                } else {
                    dev.identity.sign(&message)
                };
                let registered = &self.registry[&dev.id].identity;
                if !registered.verify(&message, &signature) {
                    self.rejected_joins.push(RejectedJoin {
                        device: dev.id.clone(),
                        time_us: now,
                    });
                    return;
                }
                let (ring, index) = (dev.ring, dev.index);
                self.devices[device].present = true;
                let state = &mut self.rings[ring];
                state.absent.remove(&index);
                if state.stalled {
                    state.stalled = false;
                    self.push(now, Event::Originate { ring });
                }
            }
        }
    }
}
