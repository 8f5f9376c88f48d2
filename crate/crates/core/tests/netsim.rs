use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use tokenring::command::DeviceId;
use tokenring::netsim::{
    run, verify_run, ChurnEvent, DeviceSpec, LatencyModel, NetsimError, RingSpec, SimConfig, SimOutput, Simulation,
    Topology,
};
use tokenring::observer::ChannelEvent;
use tokenring::schedule::Schedule;

fn three_devices(hop_us: u64, dwell_us: u64) -> SimConfig {
    let mut cfg = SimConfig::single_ring(&["D1", "D2", "D3"], 1000);
    cfg.latency = LatencyModel::fixed(hop_us);
    cfg.dwell_us = dwell_us;
    cfg.max_rounds = Some(1);
    cfg
}

fn schedule(chains: &[&[(&str, u64)]]) -> Schedule {
    let chains: Vec<String> = chains
        .iter()
        .map(|chain| {
            let cmds: Vec<String> = chain
                .iter()
                .map(|(d, ms)| format!(r#"{{"device":"{d}","state":"on","exec_time_ms":{ms}}}"#))
                .collect();
            format!("[{}]", cmds.join(","))
        })
        .collect();
    Schedule::from_json(&format!(r#"{{"chains":[{}]}}"#, chains.join(","))).unwrap()
}

fn zero_offsets(cfg: &mut SimConfig) {
    let ids: Vec<DeviceId> = cfg.rings.iter().flat_map(|r| r.devices.clone()).collect();
    cfg.devices = ids
        .into_iter()
        .map(|id| DeviceSpec {
            clock_offset_us: Some(0),
            ..DeviceSpec::new(id)
        })
        .collect();
}

#[test]
fn three_hops_of_ten_ms_take_forty_ms() {
    let out = run(&three_devices(10_000, 0)).unwrap();
    assert_eq!(out.rounds.len(), 1);
    let round = &out.rounds[0];
    assert_eq!(round.latency_us(), 40_000);
    assert_eq!(round.t_sum_us, 40_000);
    assert_eq!(out.events.len(), 4);
}

#[test]
fn dwell_adds_to_latency_but_not_t_sum() {
    let out = run(&three_devices(10_000, 2_000)).unwrap();
    let round = &out.rounds[0];
    assert_eq!(round.latency_us(), 46_000);
    assert_eq!(round.t_sum_us, 40_000);
    for hop in &round.hops {
        assert!(hop.t_rcv_us < hop.t_fwd_us);
    }
}

#[test]
fn counter_twenty_five_visits_nine_eight_eight() {
    let mut cfg = three_devices(1_000, 0);
    cfg.rings[0].counter = Some(25);
    let out = run(&cfg).unwrap();
    let mut visits: BTreeMap<String, usize> = BTreeMap::new();
    for hop in &out.rounds[0].hops {
        *visits.entry(hop.device.to_string()).or_default() += 1;
    }
    assert_eq!(visits["D1"], 9);
    assert_eq!(visits["D2"], 8);
    assert_eq!(visits["D3"], 8);
    assert_eq!(out.events.last().unwrap().receiver, "hub");
}

#[test]
fn identical_configs_give_identical_traces() {
    let mut cfg = SimConfig::single_ring(&["D1", "D2", "D3", "D4"], 5_000);
    cfg.seed = 77;
    cfg.latency.jitter_us = 500;
    cfg.orders.push(tokenring::netsim::OrderSpec {
        at_ms: 0,
        schedule: serde_json::from_str(r#"{"chains":[[{"device":"D1","state":"on","exec_time_ms":100},{"device":"D2","state":"off","exec_time_ms":200}]]}"#).unwrap(),
    });
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(a.rounds, b.rounds);
    assert_eq!(a.events, b.events);
    assert_eq!(a.log, b.log);
    cfg.seed = 78;
    assert_ne!(run(&cfg).unwrap().events, a.events);
}

#[test]
fn misconfiguration_is_rejected_up_front() {
    let mut cfg = SimConfig::single_ring(&["D1", "D2"], 100);
    cfg.rings.push(RingSpec::new("ring1", vec!["D2".into()]));
    assert!(matches!(Simulation::new(cfg), Err(NetsimError::Config(_))));

    let mut cfg = SimConfig::single_ring(&["D1"], 100);
    cfg.devices.push(DeviceSpec {
        clock_offset_us: Some(5_000),
        ..DeviceSpec::new("D1")
    });
    assert!(Simulation::new(cfg).is_err());

    let mut sim = Simulation::new(SimConfig::single_ring(&["D1"], 100)).unwrap();
    assert!(matches!(
        sim.churn(&"D9".into(), ChurnEvent::Leave, 0),
        Err(NetsimError::Registry(_))
    ));
}

fn honest_run(seed: u64) -> SimOutput {
    let mut cfg = SimConfig::single_ring(&["D1", "D2", "D3", "D4"], 3_000);
    cfg.seed = seed;
    let mut sim = Simulation::new(cfg).unwrap();
    sim.issue_order(0, schedule(&[&[("D1", 100), ("D2", 200)], &[("D3", 150), ("D4", 300)]]))
        .unwrap();
    sim.run()
}

#[test]
fn honest_run_verifies() {
    let out = honest_run(3);
    assert_eq!(out.log.records.len(), 4);
    assert!(verify_run(&out.owner, &out.log).unwrap());
}

#[test]
fn forged_order_of_execution_is_caught() {
    let out = honest_run(4);
    let mut log = out.log.clone();
    let d1 = log.records.iter().find(|r| r.device.as_str() == "D1").unwrap().t_com_us;
    log.records.iter_mut().find(|r| r.device.as_str() == "D2").unwrap().t_com_us = d1 - 1;
    assert!(!verify_run(&out.owner, &log).unwrap());
}

#[test]
fn wrong_solution_is_caught() {
    let out = honest_run(5);
    let mut log = out.log.clone();
    log.records[0].solution += 1u32;
    assert!(!verify_run(&out.owner, &log).unwrap());
}

#[test]
fn missing_record_is_an_error() {
    let out = honest_run(6);
    let mut log = out.log.clone();
    log.records.pop();
    assert!(matches!(verify_run(&out.owner, &log), Err(NetsimError::Incomplete(_))));
}

#[test]
fn real_solving_matches_modeled_solving() {
    let mut cfg = SimConfig::single_ring(&["D1", "D2"], 2_000);
    cfg.prime_bits = 32;
    let mut sim = Simulation::new(cfg.clone()).unwrap();
    sim.issue_order(0, schedule(&[&[("D1", 5), ("D2", 20)]])).unwrap();
    let modeled = sim.run();
    cfg.solve_mode = tokenring::netsim::SolveMode::Real;
    let mut sim = Simulation::new(cfg).unwrap();
    sim.issue_order(0, schedule(&[&[("D1", 5), ("D2", 20)]])).unwrap();
    let real = sim.run();
    let strip = |o: &SimOutput| o.log.records.iter().map(|r| (r.t_com_us, r.solution.clone())).collect::<Vec<_>>();
    assert_eq!(strip(&modeled), strip(&real));
    assert!(real.log.records.iter().all(|r| r.squarings > 0));
    assert!(verify_run(&real.owner, &real.log).unwrap());
}

#[test]
fn incomparable_commands_actuate_together() {
    let mut cfg = SimConfig::single_ring(&["D1", "D2", "D3", "D4"], 2_000);
    zero_offsets(&mut cfg);
    let mut sim = Simulation::new(cfg).unwrap();
    sim.issue_order(0, schedule(&[&[("D1", 50)], &[("D2", 50)], &[("D3", 50)], &[("D4", 50)]]))
        .unwrap();
    let out = sim.run();
    assert_eq!(out.log.records.len(), 4);
    let first = out.log.records[0].t_com_us;
    for record in &out.log.records {
        assert!((record.t_com_us - first).abs() <= 1, "{} vs {first}", record.t_com_us);
    }
    let arrivals: Vec<u64> = out.rounds[0].hops.iter().map(|h| h.t_rcv_us).collect();
    assert!(arrivals.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn expired_puzzles_are_not_executed() {
    let mut cfg = SimConfig::single_ring(&["D1", "D2"], 5_000);
    cfg.validity_ms = Some(0);
    cfg.t_diff_us = 0;
    zero_offsets(&mut cfg);
    let mut sim = Simulation::new(cfg).unwrap();
    sim.issue_order(1_500_000, schedule(&[&[("D1", 10)]])).unwrap();
    let out = sim.run();
    assert_eq!(out.log.deliveries.len(), 1);
    assert!(out.log.records.is_empty());
}

#[test]
fn tampered_orders_never_reach_a_token() {
    let mut sim = Simulation::new(SimConfig::single_ring(&["D1", "D2"], 3_000)).unwrap();
    let id = sim.issue_order(0, schedule(&[&[("D1", 10)]])).unwrap();
    sim.tamper_order(id, |o| o.commands.entries[0].blob[0] ^= 1);
    let out = sim.run();
    assert_eq!(out.rejected_orders, vec![id]);
    assert!(out.log.deliveries.is_empty());
    assert!(out.log.records.is_empty());
}

#[test]
fn uploads_round_trip_through_the_hub() {
    let mut cfg = SimConfig::single_ring(&["D1", "D2", "D3"], 6_000);
    cfg.rings[0].sub_field_bytes = Some(256);
    let mut sim = Simulation::new(cfg).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut sent = Vec::new();
    for (k, dev) in ["D2", "D1", "D2", "D3"].iter().enumerate() {
        let len = rng.gen_range(1..=200);
        let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        sim.request_upload(&(*dev).into(), k as u64 * 10, payload.clone()).unwrap();
        sent.push((dev.to_string(), payload));
    }
    assert!(sim.request_upload(&"D1".into(), 0, vec![0; 300]).is_err());
    let out = sim.run();
    let got: Vec<(String, Vec<u8>)> = out.uploads.iter().map(|u| (u.device.to_string(), u.payload.clone())).collect();
    let mut want = sent.clone();
    want.sort();
    let mut have = got.clone();
    have.sort();
    assert_eq!(have, want);
}

#[test]
fn token_length_is_constant_under_load() {
    let mut cfg = SimConfig::single_ring(&["D1", "D2", "D3", "D4"], 30_000);
    cfg.rings[0].sub_field_bytes = Some(128);
    let mut sim = Simulation::new(cfg).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    for k in 0..30u64 {
        let at = k * 1_000_000;
        let n = rng.gen_range(1..=4);
        let chain: Vec<(&str, u64)> = ["D1", "D2", "D3", "D4"][..n].iter().map(|d| (*d, 50)).collect();
        let singletons: Vec<&[(&str, u64)]> = chain.chunks(1).collect();
        sim.issue_order(at, schedule(&singletons)).unwrap();
        if k % 3 == 0 {
            sim.request_upload(&"D3".into(), at, vec![7; 64]).unwrap();
        }
    }
    let out = sim.run();
    let len = out.rounds[0].sealed_len;
    assert!(out.rounds.iter().all(|r| r.sealed_len == len));
    assert!(out.events.iter().all(|e| e.bytes == len));
    assert!(!out.uploads.is_empty());
}

fn per_round_multisets(out: &SimOutput) -> Vec<Vec<(String, String, usize)>> {
    out.rounds
        .iter()
        .map(|r| {
            let mut set: Vec<(String, String, usize)> = out
                .events
                .iter()
                .filter(|e: &&ChannelEvent| e.time_us >= r.t_beg_us && e.time_us < r.t_end_us)
                .map(|e| (e.sender.clone(), e.receiver.clone(), e.bytes))
                .collect();
            set.sort();
            set
        })
        .collect()
}

#[test]
fn flower_absence_is_invisible_on_the_channel() {
    let mut cfg = SimConfig::single_ring(&["D1", "D2", "D3"], 25_000);
    cfg.rings[0].topology = Topology::Flower;
    let mut sim = Simulation::new(cfg).unwrap();
    sim.churn(&"D2".into(), ChurnEvent::Leave, 5_500_000).unwrap();
    sim.churn(&"D2".into(), ChurnEvent::Join, 15_500_000).unwrap();
    let out = sim.run();
    assert_eq!(out.rounds.len(), 25);
    assert_eq!(out.detections.len(), 1);
    let phantom_rounds = out.rounds.iter().filter(|r| r.phantoms > 0).count();
    assert_eq!(phantom_rounds, 10);
    let sets = per_round_multisets(&out);
    assert!(sets.iter().all(|s| s == &sets[0]));
    assert_eq!(sets[0].len(), 6);
    assert!(out.stalls.is_empty());
    let present_after: Vec<_> = out.rounds[16].hops.iter().map(|h| h.device.to_string()).collect();
    assert_eq!(present_after, ["D1", "D2", "D3"]);
}

#[test]
fn ring_departure_stalls_until_rejoin() {
    let mut cfg = SimConfig::single_ring(&["D1", "D2", "D3"], 10_000);
    let mut sim = Simulation::new(cfg.clone()).unwrap();
    sim.churn(&"D2".into(), ChurnEvent::Leave, 2_500_000).unwrap();
    sim.churn(&"D2".into(), ChurnEvent::Join, 6_500_000).unwrap();
    let out = sim.run();
    assert_eq!(out.stalls.len(), 1);
    assert_eq!(out.stalls[0].device.as_str(), "D2");
    assert!(out.rounds.iter().any(|r| r.t_beg_us >= 6_500_000));
    assert!(!out.rounds.iter().any(|r| (3_000_000..6_500_000).contains(&r.t_beg_us)));

    cfg.churn.push(tokenring::netsim::ChurnSpec {
        device: "D2".into(),
        at_ms: 2_500,
        event: ChurnEvent::Leave,
        forged: false,
    });
    cfg.churn.push(tokenring::netsim::ChurnSpec {
        device: "D2".into(),
        at_ms: 6_500,
        event: ChurnEvent::Join,
        forged: true,
    });
    let forged = run(&cfg).unwrap();
    assert_eq!(forged.rejected_joins.len(), 1);
    assert_eq!(forged.rounds.len(), 3);
}

#[test]
fn parallel_rings_are_originated_in_sequence() {
    let mut cfg = SimConfig::single_ring(&["D1", "D2"], 1_000);
    cfg.rings.push(RingSpec::new("ring1", vec!["D3".into(), "D4".into()]));
    cfg.max_rounds = Some(1);
    let out = run(&cfg).unwrap();
    let begins: Vec<u64> = out.rounds.iter().map(|r| r.t_beg_us).collect();
    assert_eq!(out.rounds.len(), 2);
    assert!(begins.contains(&0) && begins.contains(&cfg.hub_stagger_us));
}

#[test]
fn wall_clock_mode_executes_and_verifies() {
    let mut cfg = SimConfig::single_ring(&["D1", "D2"], 1_000);
    cfg.max_rounds = Some(2);
    cfg.latency = LatencyModel::fixed(1_000);
    cfg.orders.push(tokenring::netsim::OrderSpec {
        at_ms: 0,
        schedule: serde_json::from_str(r#"{"chains":[[{"device":"D1","state":"on","exec_time_ms":5},{"device":"D2","state":"off","exec_time_ms":40}]]}"#).unwrap(),
    });
    let wall = tokenring::netsim::wallclock::run_wall_clock(&cfg).unwrap();
    let out = wall.output;
    assert!(wall.squarings_per_sec > 0.0);
    assert_eq!(out.rounds.len(), 2);
    assert_eq!(out.log.records.len(), 2);
    assert!(out.events.iter().all(|e| e.bytes == out.rounds[0].sealed_len));
    assert!(verify_run(&out.owner, &out.log).unwrap());

    let mut flower = cfg.clone();
    flower.rings[0].topology = Topology::Flower;
    assert!(tokenring::netsim::wallclock::run_wall_clock(&flower).is_err());
}
