//! Real-time variant of the simulator: one thread per node, message queues
//! between them, real sleeps for link latency and real squarings for
//! puzzles. Timing is not reproducible; use it for small rings only.

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::topology::{build_ring, Capacities, RingConfig};
use super::{
    Delivery, ExecutionLog, ExecutionRecord, HopTiming, NetsimError, OwnerOrder, OwnerState, RoundTrace, SimConfig,
    SimOutput,
    Topology, HUB,
};
use crate::command::DeviceId;
use crate::identity::Identity;
use crate::observer::ChannelEvent;
use crate::schedule::{assign_delays, check_order, create_order, sign_order, DeviceRegistry, RegisteredDevice, Schedule};
use crate::timelock::{calibrate, param_gen, Puzzle, RateSource};
use crate::token::{load_commands, open, seal, SealedToken, Token};

pub const MAX_WALL_CLOCK_DEVICES: usize = 8;
const DEFAULT_ROUNDS: u64 = 3;

#[derive(Debug, Clone)]
pub struct WallClockOutput {
    /// Same shape as a virtual-time run; times are wall-clock microseconds
    /// since the start.
    pub output: SimOutput,
    /// Calibrated local squaring rate used for every device.
    pub squarings_per_sec: f64,
}

enum Message {
    Token(SealedToken),
    Stop,
}

struct Shared {
    start: Instant,
    events: Mutex<Vec<ChannelEvent>>,
    hops: Mutex<Vec<(u64, HopTiming)>>,
    records: Mutex<Vec<ExecutionRecord>>,
}

impl Shared {
    fn now_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    /// Logs the transmission, holds the sender for the link latency, then
    /// hands the token over.
    fn transmit(&self, from: &str, to: &str, sealed: SealedToken, latency_us: u64, link: &Sender<Message>) {
        self.events.lock().unwrap().push(ChannelEvent {
            time_us: self.now_us(),
            sender: from.to_string(),
            receiver: to.to_string(),
            bytes: sealed.len(),
        });
        thread::sleep(Duration::from_micros(latency_us));
        let _ = link.send(Message::Token(sealed));
    }
}

/// Runs `max_rounds` rounds (3 by default) of a single plain ring in real
/// time. Orders are loaded one per round in config order; uploads and churn
/// are not supported in this mode.
pub fn run_wall_clock(config: &SimConfig) -> Result<WallClockOutput, NetsimError> {
    let [spec] = config.rings.as_slice() else {
        return Err(NetsimError::Config("wall-clock mode runs exactly one ring".into()));
    };
    if spec.topology != Topology::Ring {
        return Err(NetsimError::Config("wall-clock mode supports the ring topology only".into()));
    }
    if spec.devices.len() > MAX_WALL_CLOCK_DEVICES {
        return Err(NetsimError::Config(format!(
            "wall-clock mode is limited to {MAX_WALL_CLOCK_DEVICES} devices"
        )));
    }
    if !config.uploads.is_empty() || !config.churn.is_empty() {
        return Err(NetsimError::Config("wall-clock mode does not model uploads or churn".into()));
    }

    let rate = calibrate(RateSource::WallClock, 200_000);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let params = param_gen(config.prime_bits, config.seed)?;
    let owner = Identity::generate("owner", &mut rng);
    let mut identities = Vec::new();
    let mut registry = DeviceRegistry::new();
    let mut sub_fields = Vec::new();
    for id in &spec.devices {
        let identity = Identity::generate(id.as_str(), &mut rng);
        registry.insert(
            id.clone(),
            RegisteredDevice {
                identity: identity.public(),
                squarings_per_sec: rate,
            },
        );
        sub_fields.push(spec.sub_field_bytes.unwrap_or(config.device_spec(id).kind.default_sub_field()));
        identities.push(identity);
    }
    let capacities = Capacities {
        command: spec.command_capacity,
        sub_fields,
    };
    let mut ring: RingConfig = build_ring(&spec.ring_id, &spec.devices, Topology::Ring, &capacities, config.seed)?;
    ring.counter = spec.counter.unwrap_or(ring.counter);

    let hop_times = ring.forward_offsets(&config.latency, config.dwell_us);
    let mut owner_orders = Vec::new();
    let mut signed = Vec::new();
    for (order_id, order) in config.orders.iter().enumerate() {
        let schedule = Schedule::try_from(order.schedule.clone())?;
        let delays = assign_delays(&schedule, &hop_times)?;
        let created = create_order(&schedule, &registry, &params, &delays, u64::MAX, &mut rng)?;
        owner_orders.push(OwnerOrder {
            order_id,
            ring_id: ring.ring_id.clone(),
            issued_at_us: order.at_ms * 1000,
            schedule,
            t_hats: created.t_hats,
            delays_us: delays,
        });
        let order = sign_order(&owner, HUB, created.commands);
        if check_order(&order, &owner.public()).is_err() {
            return Err(NetsimError::Config(format!("order {order_id} failed verification at the hub")));
        }
        signed.push(order);
    }
    let orders = signed.clone();

    let shared = Arc::new(Shared {
        start: Instant::now(),
        events: Mutex::new(Vec::new()),
        hops: Mutex::new(Vec::new()),
        records: Mutex::new(Vec::new()),
    });
    let n = ring.devices.len();
    let (hub_tx, hub_rx) = mpsc::channel();
    let (txs, rxs): (Vec<Sender<Message>>, Vec<Receiver<Message>>) = (0..n).map(|_| mpsc::channel()).unzip();
    let bytes = ring.sealed_len();
    let latency_us = config.latency.base_us(bytes);

    let mut workers = Vec::new();
    for (i, (rx, identity)) in rxs.into_iter().zip(identities).enumerate() {
        let next = txs[(i + 1) % n].clone();
        let ctx = DeviceContext {
            index: i,
            id: ring.devices[i].clone(),
            next_addr: ring.devices[(i + 1) % n].to_string(),
            identity,
            key: ring.key,
            dwell_us: config.dwell_us,
            latency_us,
            shared: Arc::clone(&shared),
        };
        let hub_tx = hub_tx.clone();
        workers.push(thread::spawn(move || device_loop(ctx, rx, next, hub_tx)));
    }

    let rounds = config.max_rounds.unwrap_or(DEFAULT_ROUNDS);
    let layout = ring.token_layout();
    let mut traces = Vec::new();
    let mut deliveries = Vec::new();
    let mut pending = signed.into_iter().enumerate();
    for round in 0..rounds {
        let token_id = rand::RngCore::next_u64(&mut rng);
        let fresh = Token::fresh(&layout, token_id, ring.counter, &mut rng);
        let order = pending.next();
        let token = load_commands(&fresh, order.as_ref().map(|(_, o)| &o.commands), &mut rng)?;
        if let Some((order_id, _)) = order {
            deliveries.push(Delivery {
                order_id,
                ring_id: ring.ring_id.clone(),
                token_id,
            });
        }
        let beg = shared.now_us();
        shared.transmit(HUB, ring.devices[0].as_str(), seal(&token, &ring.key, &mut rng), latency_us, &txs[0]);
        let Ok(Message::Token(_)) = hub_rx.recv() else {
            return Err(NetsimError::Incomplete("a device thread stopped".into()));
        };
        let end = shared.now_us();
        let hops: Vec<HopTiming> = shared
            .hops
            .lock()
            .unwrap()
            .iter()
            .filter(|(t, _)| *t == token_id)
            .map(|(_, h)| h.clone())
            .collect();
        let dwell: u64 = hops.iter().map(|h| h.t_fwd_us - h.t_rcv_us).sum();
        traces.push(RoundTrace {
            ring_id: ring.ring_id.clone(),
            round,
            token_id,
            t_beg_us: beg,
            t_end_us: end,
            t_sum_us: (end - beg).saturating_sub(dwell),
            hops,
            sealed_len: bytes,
            phantoms: 0,
        });
    }
    for tx in &txs {
        let _ = tx.send(Message::Stop);
    }
    for worker in workers {
        worker.join().map_err(|_| NetsimError::Incomplete("device thread panicked".into()))?;
    }

    let mut events = std::mem::take(&mut *shared.events.lock().unwrap());
    events.sort_by_key(|e| e.time_us);
    let records = std::mem::take(&mut *shared.records.lock().unwrap());
    let duration_us = shared.now_us();
    Ok(WallClockOutput {
        output: SimOutput {
            duration_us,
            rings: vec![ring],
            rounds: traces,
            events,
            log: ExecutionLog { deliveries, records },
            owner: OwnerState {
                trapdoor: params.trapdoor(),
                orders: owner_orders,
            },
            orders,
            stalls: Vec::new(),
            uploads: Vec::new(),
            rejected_orders: Vec::new(),
            rejected_joins: Vec::new(),
            detections: Vec::new(),
            requested_uploads: Vec::new(),
        },
        squarings_per_sec: rate,
    })
}

struct DeviceContext {
    index: usize,
    id: DeviceId,
    next_addr: String,
    identity: Identity,
    key: crate::token::RingKey,
    dwell_us: u64,
    latency_us: u64,
    shared: Arc<Shared>,
}

fn device_loop(ctx: DeviceContext, rx: Receiver<Message>, next: Sender<Message>, hub: Sender<Message>) {
    let mut rng = ChaCha20Rng::seed_from_u64(ctx.index as u64);
    let mut last_token = None;
    let mut solvers = Vec::new();
    while let Ok(Message::Token(sealed)) = rx.recv() {
        let t_rcv = ctx.shared.now_us();
        let Ok(mut token) = open(&sealed, &ctx.key) else { continue };
        let mut puzzle = None;
        if last_token != Some(token.token_id) {
            last_token = Some(token.token_id);
            puzzle = token
                .commands()
                .and_then(|c| c.entry_for(&ctx.id).cloned())
                .and_then(|e| ctx.identity.decrypt(&e.blob).ok())
                .and_then(|b| Puzzle::from_bytes(&b).ok());
        }
        token.counter = token.counter.saturating_sub(1);
        thread::sleep(Duration::from_micros(ctx.dwell_us));
        let t_fwd = ctx.shared.now_us();
        ctx.shared.hops.lock().unwrap().push((
            token.token_id,
            HopTiming {
                device: ctx.id.clone(),
                t_rcv_us: t_rcv,
                t_fwd_us: t_fwd,
            },
        ));
        let resealed = seal(&token, &ctx.key, &mut rng);
        let (addr, link) = if token.counter == 0 {
            (HUB, &hub)
        } else {
            (ctx.next_addr.as_str(), &next)
        };
        ctx.shared.transmit(ctx.id.as_str(), addr, resealed, ctx.latency_us, link);

        if let Some(puzzle) = puzzle {
            let shared = Arc::clone(&ctx.shared);
            let id = ctx.id.clone();
            let token_id = token.token_id;
            solvers.push(thread::spawn(move || {
                if let Ok(receipt) = puzzle.solve() {
                    if receipt.command.device_id == id {
                        let t_com = shared.now_us() as i64;
                        shared.records.lock().unwrap().push(ExecutionRecord {
                            token_id,
                            device: id,
                            state: receipt.command.state,
                            t_com_us: t_com,
                            solution: receipt.solution,
                            squarings: receipt.squarings_performed,
                        });
                    }
                }
            }));
        }
    }
    for solver in solvers {
        let _ = solver.join();
    }
}
