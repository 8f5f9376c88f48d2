use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use tokenring::experiments::{decouple_traces, run_experiment, write_rows_csv, ExperimentName, ExperimentSpec};
use tokenring::identity::Identity;
use tokenring::netsim::{self, wallclock, verify_run, ExecutionLog, NetsimError, OwnerState, RunSummary, SimConfig};
use tokenring::observer::{indistinguishability_test, read_trace_csv, write_trace_csv, ChannelEvent, ChannelTrace, ObserverError};

use crate::{Cli, Command, Failure};

type Outcome = Result<(), Failure>;

pub fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Keygen { devices } => keygen(cli, devices),
        Command::Run => run(cli),
        Command::Bench { experiment } => bench(cli, experiment.map(Into::into)),
        Command::Verify { run_dir, owner } => verify(cli, run_dir.as_deref(), owner.as_deref()),
        Command::Observe {
            active,
            idle,
            window_ms,
            duration_ms,
            ks_threshold,
        } => observe(cli, active, idle, *window_ms, *duration_ms, *ks_threshold),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn keygen(cli: &Cli, devices: &[String]) -> Outcome {
    let mut seen = BTreeSet::new();
    for id in devices {
        if id.is_empty() || id == "owner" || id == netsim::HUB || !seen.insert(id) {
            return Err(Failure::Usage(format!("invalid or repeated device id {id:?}")));
        }
    }
    create_dir(&cli.out)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let entities = ["owner", netsim::HUB].into_iter().chain(devices.iter().map(String::as_str));
    for id in entities {
        let identity = Identity::generate(id, &mut rng);
        let path = cli.out.join(format!("{id}.json"));
        write(&path, pretty(&identity.to_file()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<SimConfig, Failure> {
    let path = cli.config.as_ref().ok_or_else(|| Failure::usage("run needs --config <file>"))?;
    let mut config = SimConfig::from_json(&read(path)?)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Outcome {
    let config = load_config(cli)?;
    let output = if cli.wall_clock {
        let wall = wallclock::run_wall_clock(&config).map_err(Failure::usage)?;
        println!("calibrated squaring rate: {:.0}/s", wall.squarings_per_sec);
        wall.output
    } else {
        netsim::run(&config).map_err(Failure::usage)?
    };
    let summary = netsim::write_outputs(&output, config.seed, &cli.out).map_err(Failure::usage)?;
    write(&cli.out.join("config.json"), config.to_json())?;
    print_summary(&summary);
    Ok(())
}

fn print_summary(summary: &RunSummary) {
    println!("{:<10} {:>7} {:>7} {:>12} {:>12} {:>10}", "ring", "devices", "rounds", "latency_ms", "var_ms2", "token_B");
    for ring in &summary.rings {
        println!(
            "{:<10} {:>7} {:>7} {:>12.3} {:>12.3} {:>10}",
            ring.ring_id, ring.devices, ring.rounds, ring.mean_latency_ms, ring.var_latency_ms2, ring.sealed_len
        );
    }
    println!(
        "executions {}, uploads {}, rejected orders {}, stalls {}",
        summary.executions,
        summary.uploads_recovered,
        summary.rejected_orders.len(),
        summary.stalls.len()
    );
}

fn bench(cli: &Cli, experiment: Option<ExperimentName>) -> Outcome {
    if cli.wall_clock {
        return Err(Failure::usage("bench sweeps run in virtual time only; use run --wall-clock for small rings"));
    }
    let spec = match (&cli.config, experiment) {
        (Some(path), _) => {
            ExperimentSpec::from_json(&read(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => ExperimentSpec::new(name),
        (None, None) => return Err(Failure::usage("bench needs an experiment name or --config <spec>")),
    };
    let seed = cli.seed.unwrap_or(0);
    let report = run_experiment(&spec, seed).map_err(Failure::usage)?;
    create_dir(&cli.out)?;
    write(&cli.out.join("bench.json"), pretty(&report))?;
    write_rows_csv(&report.rows, &cli.out.join("bench.csv")).map_err(Failure::usage)?;

    if let Some(decouple) = &report.decouple {
        let traces = decouple_traces(&spec, seed).map_err(Failure::usage)?;
        for (name, trace) in [
            ("ring_active", &traces.ring_active),
            ("ring_idle", &traces.ring_idle),
            ("star_active", &traces.star_active),
            ("star_idle", &traces.star_idle),
        ] {
            write_trace_csv(&trace.events, &cli.out.join(format!("{name}.csv"))).map_err(Failure::usage)?;
        }
        for (label, r) in [("ring", &decouple.ring), ("star", &decouple.star)] {
            println!(
                "{label}: passed={} counts_equal={} lengths_equal={} ks={:.4}",
                r.passed, r.count_per_link_equal, r.length_multiset_equal, r.interarrival_ks_stat
            );
        }
        return Ok(());
    }
    println!(
        "{:<10} {:>4} {:>5} {:>9} {:>6} {:>12} {:>12} {:>10}",
        "label", "n", "rings", "ring_size", "rounds", "latency_ms", "var_ms2", "token_B"
    );
    for row in &report.rows {
        println!(
            "{:<10} {:>4} {:>5} {:>9} {:>6} {:>12.3} {:>12.3} {:>10.0}",
            row.label, row.n, row.rings, row.ring_size, row.rounds, row.mean_latency_ms, row.var_latency_ms2, row.mean_token_bytes
        );
    }
    Ok(())
}

fn verify(cli: &Cli, run_dir: Option<&Path>, owner: Option<&Path>) -> Outcome {
    let dir = run_dir.unwrap_or(&cli.out);
    let owner_path = owner.map(Path::to_path_buf).unwrap_or_else(|| dir.join("owner_state.json"));
    let owner: OwnerState = serde_json::from_str(&read(&owner_path)?)
        .map_err(|e| Failure::Usage(format!("{}: {e}", owner_path.display())))?;
    let log_path = dir.join("execution_log.json");
    let log: ExecutionLog =
        serde_json::from_str(&read(&log_path)?).map_err(|e| Failure::Usage(format!("{}: {e}", log_path.display())))?;
    match verify_run(&owner, &log) {
        Ok(true) => {
            println!("accepted: {} orders, {} executions verified", owner.orders.len(), log.records.len());
            Ok(())
        }
        Ok(false) => Err(Failure::Rejected("rejected: a solution or an execution order does not verify".into())),
        Err(NetsimError::Incomplete(why)) => Err(Failure::Rejected(format!("rejected: {why}"))),
        Err(e) => Err(Failure::usage(e)),
    }
}

fn load_trace(path: &Path) -> Result<Vec<ChannelEvent>, Failure> {
    read_trace_csv(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// `duration_ms` from a run summary written next to the trace, if any.
fn summary_duration(trace: &Path) -> Option<u64> {
    let summary: PathBuf = trace.parent()?.join("summary.json");
    let text = fs::read_to_string(summary).ok()?;
    serde_json::from_str::<RunSummary>(&text).ok().map(|s| s.duration_ms)
}

fn observe(cli: &Cli, active: &Path, idle: &Path, window_ms: u64, duration_ms: Option<u64>, threshold: f64) -> Outcome {
    let a = load_trace(active)?;
    let b = load_trace(idle)?;
    let duration_us = match (duration_ms, summary_duration(active), summary_duration(idle)) {
        (Some(d), _, _) => d * 1000,
        (None, Some(x), Some(y)) => x.max(y) * 1000,
        _ => a.iter().chain(&b).map(|e| e.time_us + 1).max().unwrap_or(0),
    };
    let report = indistinguishability_test(
        &ChannelTrace::new(a, duration_us),
        &ChannelTrace::new(b, duration_us),
        window_ms * 1000,
        threshold,
    )
    .map_err(|e| match e {
        ObserverError::Mismatch(m) => Failure::Usage(format!("traces are not comparable: {m}")),
        other => Failure::usage(other),
    })?;
    let json = pretty(&report);
    println!("{json}");
    create_dir(&cli.out)?;
    write(&cli.out.join("observe_report.json"), &json)?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Rejected("traces are distinguishable".into()))
    }
}
