use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetsimError, SimOutput, Stall, Topology};
use crate::command::DeviceId;
use crate::observer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSummary {
    pub ring_id: String,
    pub devices: usize,
    pub topology: Topology,
    pub rounds: usize,
    pub mean_latency_ms: f64,
    pub var_latency_ms2: f64,
    pub mean_t_sum_ms: f64,
    pub sealed_len: usize,
    pub phantoms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub duration_ms: u64,
    pub rings: Vec<RingSummary>,
    pub executions: usize,
    pub deliveries: usize,
    pub uploads_recovered: usize,
    pub rejected_orders: Vec<usize>,
    pub rejected_joins: usize,
    pub stalls: Vec<Stall>,
    pub detections: Vec<(DeviceId, u64)>,
}

pub(crate) fn mean_var(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

pub fn ring_summaries(out: &SimOutput) -> Vec<RingSummary> {
    out.rings
        .iter()
        .map(|ring| {
            let rounds: Vec<_> = out.rounds_for(&ring.ring_id).collect();
            let latencies: Vec<f64> = rounds.iter().map(|r| r.latency_us() as f64 / 1000.0).collect();
            let sums: Vec<f64> = rounds.iter().map(|r| r.t_sum_us as f64 / 1000.0).collect();
            let (mean_latency_ms, var_latency_ms2) = mean_var(&latencies);
            RingSummary {
                ring_id: ring.ring_id.clone(),
                devices: ring.devices.len(),
                topology: ring.topology,
                rounds: rounds.len(),
                mean_latency_ms,
                var_latency_ms2,
                mean_t_sum_ms: mean_var(&sums).0,
                sealed_len: ring.sealed_len(),
                phantoms: rounds.iter().map(|r| r.phantoms as u64).sum(),
            }
        })
        .collect()
}

impl RunSummary {
    pub fn from_output(out: &SimOutput, seed: u64) -> Self {
        RunSummary {
            seed,
            duration_ms: out.duration_us.div_ceil(1000),
            rings: ring_summaries(out),
            executions: out.log.records.len(),
            deliveries: out.log.deliveries.len(),
            uploads_recovered: out.uploads.len(),
            rejected_orders: out.rejected_orders.clone(),
            rejected_joins: out.rejected_joins.len(),
            stalls: out.stalls.clone(),
            detections: out.detections.clone(),
        }
    }
}

#[derive(Serialize)]
struct RoundRow<'a> {
    ring_id: &'a str,
    round: u64,
    token_id: u64,
    t_beg_us: u64,
    t_end_us: u64,
    latency_us: u64,
    t_sum_us: u64,
    sealed_len: usize,
    phantoms: u32,
}

/// Writes `trace.csv`, `rounds.csv`, `summary.json`, `execution_log.json`,
/// `owner_state.json` and one `order_<id>.bin` per signed order.
pub fn write_outputs(out: &SimOutput, seed: u64, dir: &Path) -> Result<RunSummary, NetsimError> {
    fs::create_dir_all(dir)?;
    observer::write_trace_csv(&out.events, &dir.join("trace.csv"))?;

    let mut rounds = csv::Writer::from_path(dir.join("rounds.csv")).map_err(csv_io)?;
    for r in &out.rounds {
        rounds
            .serialize(RoundRow {
                ring_id: &r.ring_id,
                round: r.round,
                token_id: r.token_id,
                t_beg_us: r.t_beg_us,
                t_end_us: r.t_end_us,
                latency_us: r.latency_us(),
                t_sum_us: r.t_sum_us,
                sealed_len: r.sealed_len,
                phantoms: r.phantoms,
            })
            .map_err(csv_io)?;
    }
    rounds.flush()?;

    let summary = RunSummary::from_output(out, seed);
    fs::write(dir.join("summary.json"), to_json(&summary))?;
    fs::write(dir.join("execution_log.json"), to_json(&out.log))?;
    fs::write(dir.join("owner_state.json"), to_json(&out.owner))?;
    for (i, order) in out.orders.iter().enumerate() {
        fs::write(dir.join(format!("order_{i}.bin")), order.to_bytes())?;
    }
    Ok(summary)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output types serialize")
}

pub(crate) fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}
