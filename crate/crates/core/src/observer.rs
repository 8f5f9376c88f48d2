//! What an eavesdropper on the home channel sees, and the tests run against
//! that view. Nothing here ever touches plaintext or keys: the inputs are
//! transmission metadata only.

use std::collections::BTreeMap;
use std::path::Path;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::command::{Command, DeviceId, SwitchState};
use crate::identity::{encrypt_to, Identity};
use crate::netsim::{LatencyModel, HUB};
use crate::schedule::{OrderEntry, OrderedCommands};
use crate::timelock::{self, Puzzle, SequentialSquarer, Trapdoor};

pub const DEFAULT_KS_THRESHOLD: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ObserverError {
    #[error("traces are not comparable: {0}")]
    Mismatch(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One transmission as seen on the air: who, to whom, when, how many bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelEvent {
    pub time_us: u64,
    pub sender: String,
    pub receiver: String,
    pub bytes: usize,
}

/// A recorded event stream and the span of virtual time it covers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChannelTrace {
    pub events: Vec<ChannelEvent>,
    pub duration_us: u64,
}

impl ChannelTrace {
    pub fn new(events: Vec<ChannelEvent>, duration_us: u64) -> Self {
        ChannelTrace { events, duration_us }
    }
}

pub fn write_trace_csv(events: &[ChannelEvent], path: &Path) -> Result<(), std::io::Error> {
    let mut writer = csv::Writer::from_path(path).map_err(std::io::Error::other)?;
    for event in events {
        writer.serialize(event).map_err(std::io::Error::other)?;
    }
    writer.flush()
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<ChannelEvent>, ObserverError> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<Result<Vec<ChannelEvent>, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sighting {
    pub device: String,
    pub time_us: u64,
    pub bytes: usize,
}

/// `in_c`: transmissions received by a device. `op_d`: transmissions sent
/// by a device. A device-to-device hop appears in both.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdversarialView {
    pub in_c: Vec<Sighting>,
    pub op_d: Vec<Sighting>,
}

impl AdversarialView {
    pub fn is_empty(&self) -> bool {
        self.in_c.is_empty() && self.op_d.is_empty()
    }

    pub fn devices(&self) -> Vec<String> {
        let mut out: Vec<String> = self.in_c.iter().chain(&self.op_d).map(|s| s.device.clone()).collect();
        out.sort();
        out.dedup();
        out
    }
}

pub fn extract_view(events: &[ChannelEvent]) -> AdversarialView {
    let mut view = AdversarialView::default();
    for e in events {
        if e.receiver != HUB {
            view.in_c.push(Sighting {
                device: e.receiver.clone(),
                time_us: e.time_us,
                bytes: e.bytes,
            });
        }
        if e.sender != HUB {
            view.op_d.push(Sighting {
                device: e.sender.clone(),
                time_us: e.time_us,
                bytes: e.bytes,
            });
        }
    }
    view
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StarAction {
    /// Hub pushes a command to the device.
    Set,
    /// Hub asks the device for data and the device answers.
    Read,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarCommand {
    pub device: DeviceId,
    pub action: StarAction,
    pub at_us: u64,
}

/// Wire sizes of the direct (non-token) baseline.
const STAR_REQUEST_BYTES: usize = 60;
const STAR_RESPONSE_BYTES: usize = 92;

/// Direct hub-to-device delivery without a token: each command is its own
/// transmission, so traffic appears exactly when and where commands go.
pub fn baseline_star_run(commands: &[StarCommand], latency: &LatencyModel, seed: u64) -> Vec<ChannelEvent> {
    let mut events = Vec::new();
    for (i, cmd) in commands.iter().enumerate() {
        let request_len = match cmd.action {
            StarAction::Set => STAR_REQUEST_BYTES + Command::new(cmd.device.clone(), SwitchState::On, 0).to_bytes().len(),
            StarAction::Read => STAR_REQUEST_BYTES,
        };
        events.push(ChannelEvent {
            time_us: cmd.at_us,
            sender: HUB.into(),
            receiver: cmd.device.to_string(),
            bytes: request_len,
        });
        if cmd.action == StarAction::Read {
            let hop = latency.sample_us(request_len, seed ^ i as u64);
            events.push(ChannelEvent {
                time_us: cmd.at_us + hop,
                sender: cmd.device.to_string(),
                receiver: HUB.into(),
                bytes: STAR_RESPONSE_BYTES,
            });
        }
    }
    events.sort();
    events
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndistinguishabilityReport {
    pub windows: u64,
    pub window_us: u64,
    pub length_multiset_equal: bool,
    pub count_per_link_equal: bool,
    pub interarrival_ks_stat: f64,
    pub ks_threshold: f64,
    pub passed: bool,
}

/// Compares two traces window by window.
///
/// The traces must span the same number of `window_us` windows. The
/// protocol passes when per-window per-link counts and the multiset of
/// lengths are identical and the KS statistic of inter-arrival times is
/// below `ks_threshold`.
pub fn indistinguishability_test(
    active: &ChannelTrace,
    idle: &ChannelTrace,
    window_us: u64,
    ks_threshold: f64,
) -> Result<IndistinguishabilityReport, ObserverError> {
    if window_us == 0 {
        return Err(ObserverError::Precondition("window must be positive".into()));
    }
    let windows = |t: &ChannelTrace| t.duration_us.div_ceil(window_us);
    if windows(active) != windows(idle) {
        return Err(ObserverError::Mismatch(format!(
            "{} windows against {}",
            windows(active),
            windows(idle)
        )));
    }
    fn counts(t: &ChannelTrace, window_us: u64) -> BTreeMap<(u64, &str, &str), usize> {
        let mut map = BTreeMap::new();
        for e in &t.events {
            *map.entry((e.time_us / window_us, e.sender.as_str(), e.receiver.as_str())).or_default() += 1;
        }
        map
    }
    let lengths = |t: &ChannelTrace| {
        let mut v: Vec<usize> = t.events.iter().map(|e| e.bytes).collect();
        v.sort_unstable();
        v
    };
    let length_multiset_equal = lengths(active) == lengths(idle);
    let count_per_link_equal = counts(active, window_us) == counts(idle, window_us);
    let ks = ks_statistic(&interarrivals(&active.events), &interarrivals(&idle.events));
    Ok(IndistinguishabilityReport {
        windows: windows(active),
        window_us,
        length_multiset_equal,
        count_per_link_equal,
        interarrival_ks_stat: ks,
        ks_threshold,
        passed: length_multiset_equal && count_per_link_equal && ks < ks_threshold,
    })
}

fn interarrivals(events: &[ChannelEvent]) -> Vec<f64> {
    let mut times: Vec<u64> = events.iter().map(|e| e.time_us).collect();
    times.sort_unstable();
    times.windows(2).map(|w| (w[1] - w[0]) as f64).collect()
}

/// Two-sample Kolmogorov-Smirnov statistic. Two empty samples give 0; one
/// empty sample against a non-empty one gives 1.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return 1.0,
        _ => {}
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub l: usize,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub expected: f64,
    /// Binomial standard deviation of the rate under random guessing.
    pub sigma: f64,
}

impl AttackReport {
    pub fn within_sigmas(&self, k: f64) -> bool {
        (self.success_rate - self.expected).abs() <= k * self.sigma
    }
}

/// The adversary receives `c_l` for `l` devices and knows the `t_hat` of
/// one of them. It scores each entry by what it can observe (entry length
/// and whether the known `t_hat` appears in the entry's bytes) and guesses
/// the best-scoring entry, breaking ties at random.
pub fn record_attack_game(l: usize, trials: usize, seed: u64) -> Result<AttackReport, ObserverError> {
    if l < 2 {
        return Err(ObserverError::Precondition("the record game needs at least 2 commands".into()));
    }
    if trials < 100 {
        return Err(ObserverError::Precondition("the record game needs at least 100 trials".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let params = timelock::param_gen(32, seed).map_err(|e| ObserverError::Precondition(e.to_string()))?;
    let devices: Vec<Identity> = (0..l).map(|i| Identity::generate(format!("D{}", i + 1), &mut rng)).collect();
    let known_t_hat: u64 = 5000;
    let mut successes = 0;
    for _ in 0..trials {
        let target = rng.gen_range(0..l);
        let mut entries = Vec::with_capacity(l);
        for (j, device) in devices.iter().enumerate() {
            let t_hat = if j == target {
                known_t_hat
            } else {
                loop {
                    let t = rng.gen_range(1000..10_000);
                    if t != known_t_hat {
                        break t;
                    }
                }
            };
            let command = Command::new(device.id(), SwitchState::On, t_hat);
            let key = timelock::random_key(&params, &mut rng);
            let puzzle = timelock::puzzle_gen(&params, t_hat, &command, &key, u64::MAX, &mut rng)
                .expect("key drawn below n");
            entries.push(OrderEntry {
                device_id: device.id().into(),
                blob: encrypt_to(&device.public(), &puzzle.to_bytes(), &mut rng),
            });
        }
        let c_l = OrderedCommands { entries };
        let needle = known_t_hat.to_be_bytes();
        let scores: Vec<(usize, bool)> = c_l
            .entries
            .iter()
            .map(|e| (e.blob.len(), e.blob.windows(8).any(|w| w == needle)))
            .collect();
        let best = scores.iter().max().copied().expect("l >= 2");
        let candidates: Vec<usize> = (0..l).filter(|&i| scores[i] == best).collect();
        let guess = candidates[rng.gen_range(0..candidates.len())];
        if guess == target {
            successes += 1;
        }
    }
    let expected = 1.0 / l as f64;
    Ok(AttackReport {
        l,
        trials,
        successes,
        success_rate: successes as f64 / trials as f64,
        expected,
        sigma: (expected * (1.0 - expected) / trials as f64).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryModel {
    /// The legitimate device's squaring rate `S`.
    pub device_rate: f64,
    /// The adversary's rate `S'`.
    pub adversary_rate: f64,
    /// Squarings the device had completed when its state was captured.
    pub handoff_after: Option<u64>,
    /// Set only for the owner, who holds `phi(n)`.
    pub trapdoor: Option<Trapdoor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloneReport {
    pub t_hat: u64,
    pub device_squarings: u64,
    /// Length of the squaring chain behind the adversary's answer,
    /// including squarings inherited through a state handoff.
    pub adversary_squarings: u64,
    /// Squarings the adversary performed itself.
    pub adversary_own_squarings: u64,
    pub device_finish_us: u64,
    pub adversary_finish_us: u64,
    /// The answer came from the totient shortcut.
    pub trapdoor_path: bool,
    /// Modular multiplications spent on the shortcut.
    pub trapdoor_multiplications: u64,
    pub same_solution: bool,
}

/// Races a cloning adversary against the device on the same puzzle. Both
/// sides are real instrumented squaring loops.
pub fn clone_attack_game(puzzle: &Puzzle, model: &AdversaryModel) -> Result<CloneReport, ObserverError> {
    let mut device = SequentialSquarer::new(puzzle.n.clone(), puzzle.a.clone());
    device.run(puzzle.t_hat);
    let device_value = device.value().clone();
    let device_finish_us = timelock::solve_duration_us(model.device_rate, puzzle.t_hat);

    if let Some(trapdoor) = &model.trapdoor {
        if trapdoor.n != puzzle.n {
            return Err(ObserverError::Precondition("trapdoor belongs to another modulus".into()));
        }
        let value = trapdoor.fast_eval(puzzle.t_hat);
        let exponent = BigUint::from(2u8).modpow(&BigUint::from(puzzle.t_hat), &trapdoor.phi_n);
        let multiplications = square_and_multiply_cost(&BigUint::from(puzzle.t_hat)) + square_and_multiply_cost(&exponent);
        return Ok(CloneReport {
            t_hat: puzzle.t_hat,
            device_squarings: device.performed(),
            adversary_squarings: 0,
            adversary_own_squarings: 0,
            device_finish_us,
            adversary_finish_us: 0,
            trapdoor_path: true,
            trapdoor_multiplications: multiplications,
            same_solution: value == device_value,
        });
    }

    let handoff = model.handoff_after.unwrap_or(0).min(puzzle.t_hat);
    let mut captured = SequentialSquarer::new(puzzle.n.clone(), puzzle.a.clone());
    captured.run(handoff);
    let receipt = puzzle
        .resume(captured)
        .map_err(|e| ObserverError::Precondition(format!("puzzle did not open: {e}")))?;
    let own = receipt.squarings_performed - handoff;
    let adversary_finish_us = timelock::solve_duration_us(model.device_rate, handoff)
        + timelock::solve_duration_us(model.adversary_rate, own);
    Ok(CloneReport {
        t_hat: puzzle.t_hat,
        device_squarings: device.performed(),
        adversary_squarings: receipt.squarings_performed,
        adversary_own_squarings: own,
        device_finish_us,
        adversary_finish_us,
        trapdoor_path: false,
        trapdoor_multiplications: 0,
        same_solution: receipt.solution == device_value,
    })
}

/// Multiplications used by left-to-right binary exponentiation.
fn square_and_multiply_cost(exponent: &BigUint) -> u64 {
    let bits = exponent.bits();
    if bits == 0 {
        return 0;
    }
    (bits - 1) + exponent.count_ones() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timelock::param_gen;

    fn ev(t: u64, s: &str, r: &str, b: usize) -> ChannelEvent {
        ChannelEvent {
            time_us: t,
            sender: s.into(),
            receiver: r.into(),
            bytes: b,
        }
    }

    fn workload() -> Vec<StarCommand> {
        [("D1", StarAction::Set), ("D2", StarAction::Set), ("D2", StarAction::Read), ("D3", StarAction::Read)]
            .iter()
            .enumerate()
            .map(|(i, (d, a))| StarCommand {
                device: (*d).into(),
                action: *a,
                at_us: (i as u64 + 1) * 10_000_000,
            })
            .collect()
    }

    #[test]
    fn star_baseline_shape() {
        let events = baseline_star_run(&workload(), &LatencyModel::default(), 1);
        assert_eq!(events.len(), 6);
        assert!(baseline_star_run(&[], &LatencyModel::default(), 1).is_empty());
        let read = &workload()[2..3];
        let events = baseline_star_run(read, &LatencyModel::default(), 1);
        assert_eq!(events.len(), 2);
        assert_eq!((events[0].receiver.as_str(), events[1].sender.as_str()), ("D2", "D2"));
        // Each burst names its device.
        let view = extract_view(&baseline_star_run(&workload(), &LatencyModel::default(), 1));
        assert_eq!(view.in_c.iter().map(|s| s.device.as_str()).collect::<Vec<_>>(), ["D1", "D2", "D2", "D3"]);
        assert_eq!(view.op_d.iter().map(|s| s.device.as_str()).collect::<Vec<_>>(), ["D2", "D3"]);
    }

    #[test]
    fn view_classification() {
        assert!(extract_view(&[]).is_empty());
        let view = extract_view(&[ev(1, "hub", "D1", 10), ev(2, "D1", "D2", 10), ev(3, "D2", "hub", 10)]);
        assert_eq!(view.in_c.len(), 2);
        assert_eq!(view.op_d.len(), 2);
        assert_eq!(view.devices(), vec!["D1".to_string(), "D2".to_string()]);
    }

    #[test]
    fn identical_traces_pass_with_zero_ks() {
        let events = vec![ev(0, "hub", "D1", 5), ev(10, "D1", "hub", 5), ev(25, "hub", "D1", 5)];
        let t = ChannelTrace::new(events, 100);
        let report = indistinguishability_test(&t, &t, 10, DEFAULT_KS_THRESHOLD).unwrap();
        assert!(report.passed);
        assert_eq!(report.interarrival_ks_stat, 0.0);
        assert_eq!(report.windows, 10);
    }

    #[test]
    fn star_leaks() {
        let active = ChannelTrace::new(baseline_star_run(&workload(), &LatencyModel::default(), 1), 50_000_000);
        let idle = ChannelTrace::new(Vec::new(), 50_000_000);
        let report = indistinguishability_test(&active, &idle, 1_000_000, DEFAULT_KS_THRESHOLD).unwrap();
        assert!(!report.count_per_link_equal);
        assert!(!report.passed);
        let short = ChannelTrace::new(Vec::new(), 20_000_000);
        assert!(matches!(
            indistinguishability_test(&active, &short, 1_000_000, 0.1),
            Err(ObserverError::Mismatch(_))
        ));
    }

    #[test]
    fn ks_oracle() {
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        assert_eq!(ks_statistic(&[1.0, 3.0], &[2.0, 4.0]), 0.5);
        assert_eq!(ks_statistic(&[], &[1.0]), 1.0);
    }

    #[test]
    fn record_game_preconditions() {
        assert!(record_attack_game(1, 1000, 0).is_err());
        assert!(record_attack_game(2, 10, 0).is_err());
    }

    #[test]
    fn clone_game_counts() {
        let params = param_gen(32, 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let key = timelock::random_key(&params, &mut rng);
        let cmd = Command::new("D1", SwitchState::On, 0);
        let puzzle = timelock::puzzle_gen(&params, 1000, &cmd, &key, u64::MAX, &mut rng).unwrap();
        let model = AdversaryModel {
            device_rate: 1e6,
            adversary_rate: 1e6,
            handoff_after: None,
            trapdoor: None,
        };
        let equal = clone_attack_game(&puzzle, &model).unwrap();
        assert_eq!((equal.device_squarings, equal.adversary_squarings), (1000, 1000));
        assert!(equal.same_solution);
        let slow = clone_attack_game(&puzzle, &AdversaryModel { adversary_rate: 5e5, ..model.clone() }).unwrap();
        assert_eq!(slow.adversary_finish_us, 2 * slow.device_finish_us);
        let handed = clone_attack_game(&puzzle, &AdversaryModel { handoff_after: Some(400), ..model.clone() }).unwrap();
        assert_eq!(handed.adversary_squarings, 1000);
        assert_eq!(handed.adversary_own_squarings, 600);
        let owner = clone_attack_game(&puzzle, &AdversaryModel { trapdoor: Some(params.trapdoor()), ..model }).unwrap();
        assert!(owner.trapdoor_path && owner.same_solution);
        assert!(owner.trapdoor_multiplications < 2 * (64 + 64));
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("tokenring-observer-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.csv");
        let events = vec![ev(1, "hub", "D1", 7), ev(2, "D1", "hub", 7)];
        write_trace_csv(&events, &path).unwrap();
        assert_eq!(read_trace_csv(&path).unwrap(), events);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("time_us,sender,receiver,bytes\n"));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
