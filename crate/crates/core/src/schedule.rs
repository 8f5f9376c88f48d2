//! Owner-side schedules: chains of commands, their linear extensions, delay
//! assignment along the token path, and signed encrypted orders.

use std::collections::{BTreeMap, BTreeSet};

use itertools::Itertools;
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use crate::command::{Command, DeviceId, SwitchState};
use crate::crypto;
use crate::identity::{encrypt_to, Identity, PublicIdentity};
use crate::timelock::{self, PuzzleParams, TimelockError};

/// Largest schedule accepted by the factorial enumerators.
pub const MAX_ENUMERATED_DEVICES: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("precedence relation is not a partial order: {0}")]
    Poset(String),
    #[error("{count} devices exceeds the enumeration limit of {MAX_ENUMERATED_DEVICES}")]
    TooLarge { count: usize },
    #[error("no public key registered for {0}")]
    Registry(DeviceId),
    #[error("no forward instant for {0}")]
    MissingHopTime(DeviceId),
    #[error("forward instants must strictly increase along the token path (at {0})")]
    HopOrder(DeviceId),
    #[error("infeasible delays: {later} must follow {earlier} by at least {required_us} us, got {actual_us} us")]
    Infeasible {
        earlier: DeviceId,
        later: DeviceId,
        required_us: u64,
        actual_us: i128,
    },
    #[error("empty schedule")]
    Empty,
    #[error("malformed order encoding: {0}")]
    Decode(&'static str),
    #[error(transparent)]
    Timelock(#[from] TimelockError),
}

/// Disjoint chains of commands. Commands in one chain are totally ordered;
/// commands in different chains are incomparable.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Schedule {
    pub chains: Vec<Vec<Command>>,
    pub epoch_us: u64,
}

/// Human-facing schedule document with millisecond times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub chains: Vec<Vec<CommandSpec>>,
    #[serde(default)]
    pub epoch_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub device: String,
    pub state: SwitchState,
    pub exec_time_ms: u64,
}

impl TryFrom<ScheduleSpec> for Schedule {
    type Error = ScheduleError;

    fn try_from(doc: ScheduleSpec) -> Result<Self, ScheduleError> {
        let chains = doc
            .chains
            .into_iter()
            .map(|chain| {
                chain
                    .into_iter()
                    .map(|c| Command::new(c.device, c.state, c.exec_time_ms * 1000))
                    .collect()
            })
            .collect();
        let mut schedule = Schedule::new(chains)?;
        schedule.epoch_us = doc.epoch_ms * 1000;
        Ok(schedule)
    }
}

impl Schedule {
    pub fn new(chains: Vec<Vec<Command>>) -> Result<Self, ScheduleError> {
        let schedule = Schedule { chains, epoch_us: 0 };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Parses `{"chains": [[{"device":"D1","state":"on","exec_time_ms":1000}, ...], ...]}`.
    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        let doc: ScheduleSpec =
            serde_json::from_str(text).map_err(|e| ScheduleError::Invalid(e.to_string()))?;
        Schedule::try_from(doc)
    }

    pub fn to_json(&self) -> String {
        let doc = ScheduleSpec {
            chains: self
                .chains
                .iter()
                .map(|chain| {
                    chain
                        .iter()
                        .map(|c| CommandSpec {
                            device: c.device_id.to_string(),
                            state: c.state,
                            exec_time_ms: c.exec_time_us / 1000,
                        })
                        .collect()
                })
                .collect(),
            epoch_ms: self.epoch_us / 1000,
        };
        serde_json::to_string(&doc).expect("schedule serializes")
    }

    pub fn is_empty(&self) -> bool {
        self.chains.iter().all(Vec::is_empty)
    }

    pub fn commands(&self) -> impl Iterator<Item = &Command> {
        self.chains.iter().flatten()
    }

    pub fn devices(&self) -> Vec<DeviceId> {
        self.commands().map(|c| c.device_id.clone()).collect()
    }

    pub fn command_for(&self, device: &DeviceId) -> Option<&Command> {
        self.commands().find(|c| &c.device_id == device)
    }

    /// Adjacent `(earlier, later)` pairs inside each chain.
    pub fn comparable_pairs(&self) -> Vec<(&Command, &Command)> {
        self.chains
            .iter()
            .flat_map(|chain| chain.iter().tuple_windows())
            .collect()
    }

    /// Devices that appear in a chain of length at least two.
    pub fn comparable_count(&self) -> usize {
        self.chains.iter().filter(|c| c.len() > 1).map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let mut seen = BTreeSet::new();
        for chain in &self.chains {
            for cmd in chain {
                if !seen.insert(cmd.device_id.clone()) {
                    return Err(ScheduleError::Invalid(format!(
                        "device {} appears more than once",
                        cmd.device_id
                    )));
                }
            }
            for (earlier, later) in chain.iter().tuple_windows() {
                if later.exec_time_us < earlier.exec_time_us {
                    return Err(ScheduleError::Invalid(format!(
                        "exec time of {} precedes that of {}",
                        later.device_id, earlier.device_id
                    )));
                }
            }
        }
        self.check_partial_order()
    }

    /// Transitive closure of the chain relation; fails if it is not
    /// antisymmetric.
    fn check_partial_order(&self) -> Result<(), ScheduleError> {
        let devices = self.devices();
        let index: BTreeMap<&DeviceId, usize> = devices.iter().enumerate().map(|(i, d)| (d, i)).collect();
        let n = devices.len();
        let mut reach = vec![vec![false; n]; n];
        for (i, row) in reach.iter_mut().enumerate() {
            row[i] = true;
        }
        for (a, b) in self.comparable_pairs() {
            reach[index[&a.device_id]][index[&b.device_id]] = true;
        }
        for k in 0..n {
            let via = reach[k].clone();
            for row in reach.iter_mut().filter(|row| row[k]) {
                for (cell, &r) in row.iter_mut().zip(&via) {
                    *cell |= r;
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if reach[i][j] && reach[j][i] {
                    return Err(ScheduleError::Poset(format!(
                        "{} and {} precede each other",
                        devices[i], devices[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One linear extension of the schedule: repeatedly emit the smallest
/// available device id whose predecessor has already been emitted.
pub fn chain(schedule: &Schedule) -> Result<Vec<DeviceId>, ScheduleError> {
    let mut indegree: BTreeMap<DeviceId, usize> = schedule.devices().into_iter().map(|d| (d, 0)).collect();
    let mut successors: BTreeMap<DeviceId, Vec<DeviceId>> = BTreeMap::new();
    for (a, b) in schedule.comparable_pairs() {
        *indegree.get_mut(&b.device_id).expect("device listed") += 1;
        successors.entry(a.device_id.clone()).or_default().push(b.device_id.clone());
    }
    let mut ready: BTreeSet<DeviceId> = indegree
        .iter()
        .filter(|(_, &deg)| deg == 0)
        .map(|(d, _)| d.clone())
        .collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(next) = ready.pop_first() {
        for succ in successors.get(&next).into_iter().flatten() {
            let deg = indegree.get_mut(succ).expect("device listed");
            *deg -= 1;
            if *deg == 0 {
                ready.insert(succ.clone());
            }
        }
        order.push(next);
    }
    if order.len() != indegree.len() {
        return Err(ScheduleError::Poset("cycle in precedence relation".into()));
    }
    Ok(order)
}

fn respects_precedence(schedule: &Schedule, order: &[&DeviceId]) -> bool {
    let position: BTreeMap<&DeviceId, usize> = order.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    schedule
        .comparable_pairs()
        .iter()
        .all(|(a, b)| position[&a.device_id] < position[&b.device_id])
}

/// Every permutation of the scheduled devices that keeps chain precedence.
pub fn linear_extensions(schedule: &Schedule) -> Result<Vec<Vec<DeviceId>>, ScheduleError> {
    let devices = schedule.devices();
    if devices.len() > MAX_ENUMERATED_DEVICES {
        return Err(ScheduleError::TooLarge { count: devices.len() });
    }
    Ok(devices
        .iter()
        .permutations(devices.len())
        .filter(|perm| respects_precedence(schedule, perm))
        .map(|perm| perm.into_iter().cloned().collect())
        .collect())
}

pub fn count_linear_extensions(schedule: &Schedule) -> Result<u64, ScheduleError> {
    let devices = schedule.devices();
    if devices.len() > MAX_ENUMERATED_DEVICES {
        return Err(ScheduleError::TooLarge { count: devices.len() });
    }
    Ok(devices
        .iter()
        .permutations(devices.len())
        .filter(|perm| respects_precedence(schedule, perm))
        .count() as u64)
}

/// Solver delays (microseconds) per device.
///
/// `hop_times` lists the token path in order with each device's forward
/// instant. Chained devices keep their requested delays, which must satisfy
/// `t_later - t_earlier >= (m - 1) * |fwd_later - fwd_earlier|` where `m` is
/// the larger 1-based path position of the pair. Devices in singleton chains
/// are aligned to actuate at the same instant as the first of them on the
/// path.
pub fn assign_delays(
    schedule: &Schedule,
    hop_times: &[(DeviceId, u64)],
) -> Result<BTreeMap<DeviceId, u64>, ScheduleError> {
    schedule.validate()?;
    for ((_, a), (d, b)) in hop_times.iter().tuple_windows() {
        if b <= a {
            return Err(ScheduleError::HopOrder(d.clone()));
        }
    }
    let path: BTreeMap<&DeviceId, (u64, u64)> = hop_times
        .iter()
        .enumerate()
        .map(|(i, (d, t))| (d, (i as u64 + 1, *t)))
        .collect();
    let locate = |d: &DeviceId| path.get(d).copied().ok_or_else(|| ScheduleError::MissingHopTime(d.clone()));

    let mut delays = BTreeMap::new();
    let mut singletons = Vec::new();
    for chain in &schedule.chains {
        match chain.as_slice() {
            [] => {}
            [only] => {
                let (position, fwd) = locate(&only.device_id)?;
                singletons.push((position, fwd, only));
            }
            _ => {
                for cmd in chain {
                    locate(&cmd.device_id)?;
                    delays.insert(cmd.device_id.clone(), cmd.exec_time_us);
                }
                for (earlier, later) in chain.iter().tuple_windows() {
                    let (pos_e, fwd_e) = locate(&earlier.device_id)?;
                    let (pos_l, fwd_l) = locate(&later.device_id)?;
                    let required = (pos_e.max(pos_l) - 1) * fwd_l.abs_diff(fwd_e);
                    let actual = later.exec_time_us as i128 - earlier.exec_time_us as i128;
                    if actual < required as i128 {
                        return Err(ScheduleError::Infeasible {
                            earlier: earlier.device_id.clone(),
                            later: later.device_id.clone(),
                            required_us: required,
                            actual_us: actual,
                        });
                    }
                }
            }
        }
    }

    singletons.sort_by_key(|(position, _, _)| *position);
    if let Some(&(_, anchor_fwd, anchor)) = singletons.first() {
        let instant = anchor_fwd + anchor.exec_time_us;
        for &(_, fwd, cmd) in &singletons {
            if fwd > instant {
                return Err(ScheduleError::Infeasible {
                    earlier: anchor.device_id.clone(),
                    later: cmd.device_id.clone(),
                    required_us: fwd - anchor_fwd,
                    actual_us: anchor.exec_time_us as i128,
                });
            }
            delays.insert(cmd.device_id.clone(), instant - fwd);
        }
    }
    Ok(delays)
}

/// `(N - k) + 1` for `N` devices of which `k` are comparable.
pub fn required_slots(device_count: usize, comparable: usize) -> usize {
    assert!(comparable <= device_count, "comparable count exceeds device count");
    device_count - comparable + 1
}

/// Largest assigned delay.
pub fn slot_length(delays: &BTreeMap<DeviceId, u64>) -> Result<u64, ScheduleError> {
    delays.values().copied().max().ok_or(ScheduleError::Empty)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderEntry {
    pub device_id: DeviceId,
    pub blob: Vec<u8>,
}

/// The encrypted per-device puzzle list `c_l`, in schedule chain order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OrderedCommands {
    pub entries: Vec<OrderEntry>,
}

impl OrderedCommands {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry_for(&self, device: &DeviceId) -> Option<&OrderEntry> {
        self.entries.iter().find(|e| &e.device_id == device)
    }

    /// Each entry as `[2 id len][id][4 blob len][blob]`, concatenated.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for entry in &self.entries {
            write_str(&mut out, entry.device_id.as_str());
            out.extend_from_slice(&(entry.blob.len() as u32).to_be_bytes());
            out.extend_from_slice(&entry.blob);
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, ScheduleError> {
        let mut entries = Vec::new();
        while !bytes.is_empty() {
            let id = read_str(&mut bytes)?;
            let len = u32::from_be_bytes(take(&mut bytes, 4)?.try_into().unwrap()) as usize;
            let blob = take(&mut bytes, len)?.to_vec();
            entries.push(OrderEntry {
                device_id: DeviceId::new(id),
                blob,
            });
        }
        Ok(OrderedCommands { entries })
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn take<'a>(bytes: &mut &'a [u8], len: usize) -> Result<&'a [u8], ScheduleError> {
    if bytes.len() < len {
        return Err(ScheduleError::Decode("truncated"));
    }
    let (head, tail) = bytes.split_at(len);
    *bytes = tail;
    Ok(head)
}

fn read_str(bytes: &mut &[u8]) -> Result<String, ScheduleError> {
    let len = u16::from_be_bytes(take(bytes, 2)?.try_into().unwrap()) as usize;
    String::from_utf8(take(bytes, len)?.to_vec()).map_err(|_| ScheduleError::Decode("identifier is not UTF-8"))
}

#[derive(Debug, Clone)]
pub struct RegisteredDevice {
    pub identity: PublicIdentity,
    pub squarings_per_sec: f64,
}

pub type DeviceRegistry = BTreeMap<DeviceId, RegisteredDevice>;

/// Output of [`create_order`]: the encrypted list plus the owner's record of
/// the squaring count given to each device.
#[derive(Debug, Clone)]
pub struct CreatedOrder {
    pub commands: OrderedCommands,
    pub t_hats: BTreeMap<DeviceId, u64>,
}

/// Builds one puzzle per scheduled device and encrypts it to that device.
///
/// `delays` (microseconds, normally from [`assign_delays`]) override the
/// requested exec times; devices missing from it keep their requested value.
pub fn create_order<R: RngCore + ?Sized>(
    schedule: &Schedule,
    registry: &DeviceRegistry,
    params: &PuzzleParams,
    delays: &BTreeMap<DeviceId, u64>,
    t_val: u64,
    rng: &mut R,
) -> Result<CreatedOrder, ScheduleError> {
    schedule.validate()?;
    let mut entries = Vec::new();
    let mut t_hats = BTreeMap::new();
    for cmd in schedule.commands() {
        let device = registry
            .get(&cmd.device_id)
            .ok_or_else(|| ScheduleError::Registry(cmd.device_id.clone()))?;
        let delay = delays.get(&cmd.device_id).copied().unwrap_or(cmd.exec_time_us);
        let t_hat = timelock::difficulty_for_us(device.squarings_per_sec, delay)?;
        let command = Command::new(cmd.device_id.clone(), cmd.state, delay);
        let key = timelock::random_key(params, rng);
        let puzzle = timelock::puzzle_gen(params, t_hat, &command, &key, t_val, rng)?;
        entries.push(OrderEntry {
            device_id: cmd.device_id.clone(),
            blob: encrypt_to(&device.identity, &puzzle.to_bytes(), rng),
        });
        t_hats.insert(cmd.device_id.clone(), t_hat);
    }
    Ok(CreatedOrder {
        commands: OrderedCommands { entries },
        t_hats,
    })
}

/// `(owner id, hub id, c_l)` with a digest and the owner's signature over it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedOrder {
    pub owner_id: String,
    pub hub_id: String,
    pub commands: OrderedCommands,
    pub digest: [u8; 32],
    pub signature: [u8; 64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum OrderRejection {
    #[error("order digest does not match its contents")]
    Tampered,
    #[error("order signature does not verify under the owner key")]
    Unauthenticated,
}

/// Length-prefixed owner id, hub id, then the entries of `c_l`.
pub fn canonical_encoding(owner_id: &str, hub_id: &str, commands: &OrderedCommands) -> Vec<u8> {
    let mut out = Vec::new();
    write_str(&mut out, owner_id);
    write_str(&mut out, hub_id);
    out.extend_from_slice(&commands.to_bytes());
    out
}

pub fn sign_order(owner: &Identity, hub_id: &str, commands: OrderedCommands) -> SignedOrder {
    let digest = crypto::sha256(&[&canonical_encoding(owner.id(), hub_id, &commands)]);
    SignedOrder {
        owner_id: owner.id().to_string(),
        hub_id: hub_id.to_string(),
        commands,
        signature: owner.sign(&digest),
        digest,
    }
}

/// Recomputes the digest, then checks the signature.
pub fn check_order(signed: &SignedOrder, owner: &PublicIdentity) -> Result<(), OrderRejection> {
    let local = crypto::sha256(&[&canonical_encoding(&signed.owner_id, &signed.hub_id, &signed.commands)]);
    if local != signed.digest {
        return Err(OrderRejection::Tampered);
    }
    if !owner.verify(&signed.digest, &signed.signature) {
        return Err(OrderRejection::Unauthenticated);
    }
    Ok(())
}

pub fn verify_order(signed: &SignedOrder, owner: &PublicIdentity) -> bool {
    check_order(signed, owner).is_ok()
}

impl SignedOrder {
    /// `[4 len][canonical encoding][32 digest][64 signature]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let body = canonical_encoding(&self.owner_id, &self.hub_id, &self.commands);
        let mut out = Vec::with_capacity(body.len() + 100);
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, ScheduleError> {
        let len = u32::from_be_bytes(take(&mut bytes, 4)?.try_into().unwrap()) as usize;
        let mut body = take(&mut bytes, len)?;
        let digest = take(&mut bytes, 32)?.try_into().unwrap();
        let signature = take(&mut bytes, 64)?.try_into().unwrap();
        if !bytes.is_empty() {
            return Err(ScheduleError::Decode("trailing bytes"));
        }
        let owner_id = read_str(&mut body)?;
        let hub_id = read_str(&mut body)?;
        Ok(SignedOrder {
            owner_id,
            hub_id,
            commands: OrderedCommands::from_bytes(body)?,
            digest,
            signature,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn on(id: &str, ms: u64) -> Command {
        Command::new(id, SwitchState::On, ms * 1000)
    }

    fn ids(order: &[DeviceId]) -> Vec<&str> {
        order.iter().map(DeviceId::as_str).collect()
    }

    fn two_pairs() -> Schedule {
        Schedule::new(vec![vec![on("D1", 100), on("D2", 200)], vec![on("D3", 100), on("D4", 300)]]).unwrap()
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"chains": [[{"device":"D1","state":"on","exec_time_ms":1000},
                                   {"device":"D2","state":"off","exec_time_ms":2000}]]}"#;
        let schedule = Schedule::from_json(text).unwrap();
        assert_eq!(schedule.chains[0][1], Command::new("D2", SwitchState::Off, 2_000_000));
        assert_eq!(Schedule::from_json(&schedule.to_json()).unwrap(), schedule);
        assert!(Schedule::from_json("{").is_err());
    }

    #[test]
    fn invariants_rejected() {
        assert!(Schedule::new(vec![vec![on("D1", 1)], vec![on("D1", 2)]]).is_err());
        assert!(Schedule::new(vec![vec![on("D1", 5), on("D2", 2)]]).is_err());
    }

    #[test]
    fn chain_examples() {
        assert_eq!(ids(&chain(&two_pairs()).unwrap()), ["D1", "D2", "D3", "D4"]);
        let single = Schedule::new(vec![vec![on("D1", 1), on("D2", 2), on("D3", 3)]]).unwrap();
        assert_eq!(ids(&chain(&single).unwrap()), ["D1", "D2", "D3"]);
        let loose = Schedule::new(vec![vec![on("D4", 1)], vec![on("D2", 1)], vec![on("D3", 1)], vec![on("D1", 1)]]).unwrap();
        assert_eq!(ids(&chain(&loose).unwrap()), ["D1", "D2", "D3", "D4"]);
        // Lowest id first, but D2 still needs D1.
        let crossed = Schedule::new(vec![vec![on("D3", 1), on("D4", 2)], vec![on("D1", 1), on("D2", 2)]]).unwrap();
        assert_eq!(ids(&chain(&crossed).unwrap()), ["D1", "D2", "D3", "D4"]);
        let reversed = Schedule::new(vec![vec![on("D2", 1), on("D1", 2)], vec![on("D3", 1)]]).unwrap();
        assert_eq!(ids(&chain(&reversed).unwrap()), ["D2", "D1", "D3"]);
    }

    #[test]
    fn counting() {
        assert_eq!(count_linear_extensions(&two_pairs()).unwrap(), 6);
        let single = Schedule::new(vec![vec![on("D1", 1), on("D2", 2), on("D3", 3)]]).unwrap();
        assert_eq!(count_linear_extensions(&single).unwrap(), 1);
        let loose = Schedule::new(vec![vec![on("D1", 1)], vec![on("D2", 1)], vec![on("D3", 1)]]).unwrap();
        assert_eq!(count_linear_extensions(&loose).unwrap(), 6);
        let big = Schedule::new((1..=11).map(|i| vec![on(&format!("D{i}"), 1)]).collect()).unwrap();
        assert!(matches!(count_linear_extensions(&big), Err(ScheduleError::TooLarge { count: 11 })));
    }

    #[test]
    fn incomparable_delays_align() {
        let schedule = Schedule::new(vec![vec![on("D1", 1000)], vec![on("D2", 1000)]]).unwrap();
        let hops = [(DeviceId::from("D1"), 10_000), (DeviceId::from("D2"), 20_000)];
        let delays = assign_delays(&schedule, &hops).unwrap();
        assert_eq!(delays[&DeviceId::from("D1")], 1_000_000);
        assert_eq!(delays[&DeviceId::from("D2")], 990_000);
        // Both actuate at the same instant.
        assert_eq!(10_000 + delays[&DeviceId::from("D1")], 20_000 + delays[&DeviceId::from("D2")]);
        assert_eq!(slot_length(&delays).unwrap(), 1_000_000);
    }

    #[test]
    fn single_device_unchanged() {
        let schedule = Schedule::new(vec![vec![on("D1", 750)]]).unwrap();
        let delays = assign_delays(&schedule, &[(DeviceId::from("D1"), 5)]).unwrap();
        assert_eq!(delays[&DeviceId::from("D1")], 750_000);
    }

    #[test]
    fn comparable_lower_bound() {
        let hops = [(DeviceId::from("D1"), 10_000), (DeviceId::from("D2"), 20_000)];
        let tight = Schedule::new(vec![vec![on("D1", 100), on("D2", 110)]]).unwrap();
        assert!(assign_delays(&tight, &hops).is_ok());
        let loose = Schedule::new(vec![vec![on("D1", 100), on("D2", 109)]]).unwrap();
        match assign_delays(&loose, &hops) {
            Err(ScheduleError::Infeasible { earlier, later, required_us, .. }) => {
                assert_eq!((earlier.as_str(), later.as_str(), required_us), ("D1", "D2", 10_000));
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn hop_times_validated() {
        let schedule = Schedule::new(vec![vec![on("D1", 100)], vec![on("D9", 100)]]).unwrap();
        let hops = [(DeviceId::from("D1"), 10), (DeviceId::from("D2"), 10)];
        assert!(matches!(assign_delays(&schedule, &hops), Err(ScheduleError::HopOrder(_))));
        let hops = [(DeviceId::from("D1"), 10)];
        assert!(matches!(assign_delays(&schedule, &hops), Err(ScheduleError::MissingHopTime(_))));
    }

    #[test]
    fn slot_helpers() {
        assert_eq!(required_slots(10, 10), 1);
        assert_eq!(required_slots(10, 0), 11);
        assert_eq!(required_slots(5, 2), 4);
        let delays: BTreeMap<DeviceId, u64> =
            [("D1", 100), ("D2", 300), ("D3", 200)].into_iter().map(|(d, t)| (d.into(), t)).collect();
        assert_eq!(slot_length(&delays).unwrap(), 300);
        assert!(matches!(slot_length(&BTreeMap::new()), Err(ScheduleError::Empty)));
    }

    fn registry(rng: &mut ChaCha20Rng, names: &[&str]) -> (Vec<Identity>, DeviceRegistry) {
        let identities: Vec<Identity> = names.iter().map(|n| Identity::generate(*n, &mut *rng)).collect();
        let registry = identities
            .iter()
            .map(|id| {
                (
                    DeviceId::from(id.id()),
                    RegisteredDevice {
                        identity: id.public(),
                        squarings_per_sec: 1000.0,
                    },
                )
            })
            .collect();
        (identities, registry)
    }

    #[test]
    fn create_order_entries_open_only_for_owner_device() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let params = timelock::param_gen(32, 21).unwrap();
        let (identities, registry) = registry(&mut rng, &["D1", "D2", "D3", "D4"]);
        let order = create_order(&two_pairs(), &registry, &params, &BTreeMap::new(), u64::MAX, &mut rng).unwrap();
        assert_eq!(order.commands.len(), 4);
        assert_eq!(order.t_hats[&DeviceId::from("D1")], 100);
        for (i, entry) in order.commands.entries.iter().enumerate() {
            for (j, identity) in identities.iter().enumerate() {
                assert_eq!(identity.decrypt(&entry.blob).is_ok(), i == j);
            }
        }
        let puzzle = timelock::Puzzle::from_bytes(&identities[0].decrypt(&order.commands.entries[0].blob).unwrap()).unwrap();
        assert_eq!(puzzle.t_hat, 100);
        assert_eq!(puzzle.solve().unwrap().command.device_id, DeviceId::from("D1"));
    }

    #[test]
    fn create_order_edge_cases() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let params = timelock::param_gen(32, 22).unwrap();
        let (_, registry) = registry(&mut rng, &["D1"]);
        let empty = create_order(&Schedule::default(), &registry, &params, &BTreeMap::new(), 0, &mut rng).unwrap();
        assert!(empty.commands.is_empty());
        let missing = create_order(&two_pairs(), &registry, &params, &BTreeMap::new(), 0, &mut rng);
        assert!(matches!(missing, Err(ScheduleError::Registry(_))));
    }

    #[test]
    fn signed_order_checks() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let owner = Identity::generate("owner", &mut rng);
        let impostor = Identity::generate("owner", &mut rng);
        let commands = OrderedCommands {
            entries: vec![OrderEntry {
                device_id: "D1".into(),
                blob: vec![1, 2, 3],
            }],
        };
        let signed = sign_order(&owner, "hub", commands.clone());
        assert!(verify_order(&signed, &owner.public()));
        assert_eq!(SignedOrder::from_bytes(&signed.to_bytes()).unwrap(), signed);

        let mut tampered = signed.clone();
        tampered.commands.entries[0].blob[1] ^= 0xff;
        assert_eq!(check_order(&tampered, &owner.public()), Err(OrderRejection::Tampered));

        let forged = sign_order(&impostor, "hub", commands);
        assert_eq!(check_order(&forged, &owner.public()), Err(OrderRejection::Unauthenticated));
    }
}
