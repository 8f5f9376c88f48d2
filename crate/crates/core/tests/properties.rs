use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tokenring::command::{Command, DeviceId, SwitchState};
use tokenring::experiments::{device_ids, split};
use tokenring::netsim::{run, LatencyModel, RingSpec, SimConfig};
use tokenring::observer::{extract_view, indistinguishability_test, ks_statistic, ChannelTrace};
use tokenring::schedule::{assign_delays, chain, linear_extensions, Schedule};
use tokenring::timelock::{fast_eval, param_gen, puzzle_gen, random_key};
use tokenring::token::{load_commands, open, seal, Token, TokenLayout};

/// Disjoint chains over D1..Dn with increasing exec times inside each chain.
fn schedules(max_devices: usize) -> impl Strategy<Value = Schedule> {
    (1..=max_devices)
        .prop_flat_map(|n| (Just(n), Just((1..=n).collect::<Vec<_>>()).prop_shuffle(), prop::collection::vec(1usize..=3, n)))
        .prop_map(|(_, ids, cuts)| {
            let mut chains = Vec::new();
            let mut k = 0;
            let mut cut = cuts.iter().cycle();
            while k < ids.len() {
                let len = (*cut.next().unwrap()).min(ids.len() - k);
                let chain_cmds = ids[k..k + len]
                    .iter()
                    .enumerate()
                    .map(|(j, i)| Command::new(format!("D{i}"), SwitchState::On, (j as u64 + 1) * 200_000))
                    .collect();
                chains.push(chain_cmds);
                k += len;
            }
            Schedule::new(chains).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chain_output_is_a_linear_extension(schedule in schedules(6)) {
        let order = chain(&schedule).unwrap();
        prop_assert!(linear_extensions(&schedule).unwrap().contains(&order));
    }

    #[test]
    fn comparable_delays_respect_the_path_bound(schedule in schedules(6), hop in 1_000u64..5_000) {
        let path: Vec<(DeviceId, u64)> = (1..=6).map(|i| (DeviceId::new(format!("D{i}")), i * hop)).collect();
        let positions: BTreeMap<DeviceId, (u64, u64)> =
            path.iter().enumerate().map(|(p, (d, t))| (d.clone(), (p as u64 + 1, *t))).collect();
        // Chain gaps of 200 ms always clear the bound for hops under 5 ms.
        let delays = assign_delays(&schedule, &path).unwrap();
        for (a, b) in schedule.comparable_pairs() {
            let (pa, fa) = positions[&a.device_id];
            let (pb, fb) = positions[&b.device_id];
            let gap = delays[&b.device_id] as i128 - delays[&a.device_id] as i128;
            prop_assert!(gap >= ((pa.max(pb) - 1) * fa.abs_diff(fb)) as i128);
        }
        let instants: Vec<u64> = schedule
            .chains
            .iter()
            .filter(|c| c.len() == 1)
            .map(|c| positions[&c[0].device_id].1 + delays[&c[0].device_id])
            .collect();
        prop_assert!(instants.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn sealed_length_ignores_contents(commands in 0usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layout = TokenLayout { command_capacity: 2048, data_capacity: 256, device_count: 4 };
        let key = [7u8; 16];
        let empty = seal(&Token::fresh(&layout, 1, 4, &mut rng), &key, &mut rng);
        let params = param_gen(32, seed % 8).unwrap();
        let registry = (1..=4)
            .map(|i| {
                let id = tokenring::identity::Identity::generate(format!("D{i}"), &mut rng);
                (DeviceId::new(format!("D{i}")), tokenring::schedule::RegisteredDevice { identity: id.public(), squarings_per_sec: 1e6 })
            })
            .collect();
        let chains = (1..=commands).map(|i| vec![Command::new(format!("D{i}"), SwitchState::Off, 10_000)]).collect();
        let schedule = Schedule::new(chains).unwrap();
        let created = tokenring::schedule::create_order(&schedule, &registry, &params, &BTreeMap::new(), u64::MAX, &mut rng).unwrap();
        let loaded = load_commands(&Token::fresh(&layout, 2, 4, &mut rng), Some(&created.commands), &mut rng).unwrap();
        let sealed = seal(&loaded, &key, &mut rng);
        prop_assert_eq!(sealed.len(), empty.len());
        prop_assert_eq!(open(&sealed, &key).unwrap(), loaded);
    }

    #[test]
    fn trapdoor_matches_squaring(t_hat in 1u64..3_000, seed in 0u64..16) {
        let params = param_gen(32, seed).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let command = Command::new("D1", SwitchState::On, t_hat);
        let key = random_key(&params, &mut rng);
        let puzzle = puzzle_gen(&params, t_hat, &command, &key, u64::MAX, &mut rng).unwrap();
        let receipt = puzzle.solve().unwrap();
        prop_assert_eq!(receipt.solution, fast_eval(&params, t_hat));
        prop_assert_eq!(receipt.squarings_performed, t_hat);
        prop_assert_eq!(receipt.command, command);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_traces_satisfy_timing_identities(n in 1usize..10, dwell in 0u64..3_000, jitter in 0u64..2_000, seed in any::<u64>()) {
        let ids = device_ids(n);
        let names: Vec<&str> = ids.iter().map(|d| d.as_str()).collect();
        let mut cfg = SimConfig::single_ring(&names, 5_000);
        cfg.seed = seed;
        cfg.dwell_us = dwell;
        cfg.latency.jitter_us = jitter;
        let out = run(&cfg).unwrap();
        prop_assert_eq!(out.rounds.len(), 5);
        for round in &out.rounds {
            prop_assert!(round.t_beg_us < round.t_end_us);
            let dwell_sum: u64 = round.hops.iter().map(|h| h.t_fwd_us - h.t_rcv_us).sum();
            prop_assert_eq!(round.t_sum_us, round.latency_us() - dwell_sum);
            if dwell > 0 {
                prop_assert!(round.hops.iter().all(|h| h.t_rcv_us < h.t_fwd_us));
            }
        }
        prop_assert_eq!(&run(&cfg).unwrap().events, &out.events);
    }

    #[test]
    fn splitting_rings_matches_smaller_single_ring(m in 1usize..12, r in 1usize..4, beta in 0.0f64..0.2) {
        let ids = device_ids(m * r);
        let mut parallel = SimConfig::single_ring(&[], 3_000);
        parallel.latency = LatencyModel { alpha_us: 2_000, beta_us_per_byte: beta, jitter_us: 0 };
        parallel.rings = split(&ids, r)
            .into_iter()
            .enumerate()
            .map(|(k, devices)| RingSpec::new(format!("ring{k}"), devices))
            .collect();
        let mut single = parallel.clone();
        single.rings = vec![RingSpec::new("ring0", ids[..m].to_vec())];
        let reference = run(&single).unwrap().rounds[0].latency_us();
        for round in run(&parallel).unwrap().rounds {
            prop_assert_eq!(round.latency_us(), reference);
        }
    }

    #[test]
    fn ring_views_are_uniform(n in 1usize..8, seed in any::<u64>()) {
        let ids = device_ids(n);
        let names: Vec<&str> = ids.iter().map(|d| d.as_str()).collect();
        let mut cfg = SimConfig::single_ring(&names, 3_000);
        cfg.seed = seed;
        let out = run(&cfg).unwrap();
        for round in &out.rounds {
            let events: Vec<_> = out
                .events
                .iter()
                .filter(|e| e.time_us >= round.t_beg_us && e.time_us < round.t_end_us)
                .cloned()
                .collect();
            prop_assert_eq!(events.len(), n + 1);
            prop_assert!(events.iter().all(|e| e.bytes == round.sealed_len));
            let mut expected = vec![("hub".to_string(), names[0].to_string())];
            for w in names.windows(2) {
                expected.push((w[0].to_string(), w[1].to_string()));
            }
            expected.push((names[n - 1].to_string(), "hub".to_string()));
            let mut seen: Vec<_> = events.iter().map(|e| (e.sender.clone(), e.receiver.clone())).collect();
            seen.sort();
            expected.sort();
            prop_assert_eq!(seen, expected);
            let view = extract_view(&events);
            prop_assert_eq!(view.devices().len(), n);
        }
    }

    #[test]
    fn identical_traces_are_indistinguishable(n in 1usize..6, seed in any::<u64>()) {
        let ids = device_ids(n);
        let names: Vec<&str> = ids.iter().map(|d| d.as_str()).collect();
        let mut cfg = SimConfig::single_ring(&names, 4_000);
        cfg.seed = seed;
        cfg.latency.jitter_us = 300;
        let out = run(&cfg).unwrap();
        let trace = ChannelTrace::new(out.events.clone(), out.duration_us);
        let report = indistinguishability_test(&trace, &trace, 1_000_000, 0.1).unwrap();
        prop_assert!(report.passed);
        prop_assert_eq!(report.interarrival_ks_stat, 0.0);
        let gaps: Vec<f64> = out.events.windows(2).map(|w| (w[1].time_us - w[0].time_us) as f64).collect();
        prop_assert_eq!(ks_statistic(&gaps, &gaps), 0.0);
    }
}
