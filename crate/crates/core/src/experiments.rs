//! Reproducible sweeps over the simulator: the decoupling comparison against
//! a star network, latency and token-length scaling, parallel rings, and
//! skew separation. Each experiment is a pure function of its spec and seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::command::{DeviceId, SwitchState};
use crate::netsim::{
    self, partition_by_skew, skew_count, DeviceKind, DeviceSpec, LatencyModel, NetsimError, OrderSpec, RingSpec,
    SimConfig, SimOutput, UploadSpec,
};
use crate::observer::{
    baseline_star_run, indistinguishability_test, ChannelTrace, IndistinguishabilityReport, ObserverError, StarAction,
    StarCommand, DEFAULT_KS_THRESHOLD,
};
use crate::schedule::{CommandSpec, ScheduleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Decouple,
    Latency,
    TokenLength,
    ParallelRings,
    Skew,
}

/// Parameters of one experiment. Unset fields take per-experiment defaults
/// from [`ExperimentSpec::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    /// Device counts swept (the first entry only for parallel rings, skew
    /// and decouple).
    pub n_values: Vec<usize>,
    /// Ring counts for the parallel-ring experiment.
    pub ring_counts: Vec<usize>,
    pub skew_ratio: f64,
    /// Rounds simulated per point and seed.
    pub rounds: u64,
    /// Seeds `seed, seed + 1, ...` averaged per point.
    pub repetitions: u64,
    pub latency: LatencyModel,
    pub sub_field_bytes: usize,
    pub command_capacity: usize,
}

impl ExperimentSpec {
    pub fn new(name: ExperimentName) -> Self {
        let base = ExperimentSpec {
            name,
            n_values: (3..=75).step_by(12).collect(),
            ring_counts: vec![1],
            skew_ratio: 0.1,
            rounds: 20,
            repetitions: 1,
            latency: LatencyModel::default(),
            sub_field_bytes: 64,
            command_capacity: 1024,
        };
        match name {
            ExperimentName::Decouple => ExperimentSpec {
                n_values: vec![3],
                sub_field_bytes: netsim::NON_SKEW_SUB_FIELD,
                command_capacity: 4096,
                ..base
            },
            ExperimentName::Latency => base,
            ExperimentName::TokenLength => ExperimentSpec {
                n_values: vec![3, 27, 51, 63, 75],
                rounds: 5,
                ..base
            },
            ExperimentName::ParallelRings => ExperimentSpec {
                n_values: vec![75],
                ring_counts: vec![1, 2, 3],
                ..base
            },
            ExperimentName::Skew => ExperimentSpec {
                n_values: vec![40],
                rounds: 3,
                ..base
            },
        }
    }

    /// Parses a JSON spec; only `name` is required.
    pub fn from_json(text: &str) -> Result<Self, NetsimError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| NetsimError::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        let name: ExperimentName = serde_json::from_value(value.get("name").cloned().unwrap_or_default())
            .map_err(|e| NetsimError::Config(format!("experiment name: {e}")))?;
        let mut merged = serde_json::to_value(ExperimentSpec::new(name)).expect("spec serializes");
        if let (Some(target), Some(source)) = (merged.as_object_mut(), value.as_object()) {
            for (k, v) in source {
                target.insert(k.clone(), v.clone());
            }
        }
        serde_json::from_value(merged).map_err(|e| NetsimError::Config(e.to_string()))
    }

    fn first_n(&self) -> Result<usize, NetsimError> {
        match self.n_values.first() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(NetsimError::Config("n_values needs a positive first entry".into())),
        }
    }
}

/// One line of a bench table. Latencies are in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub n: usize,
    pub rings: usize,
    pub ring_size: usize,
    pub rounds: usize,
    pub mean_latency_ms: f64,
    pub var_latency_ms2: f64,
    pub mean_token_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoupleReport {
    pub ring: IndistinguishabilityReport,
    pub star: IndistinguishabilityReport,
}

impl DecoupleReport {
    /// The ring hides the workload and the star does not.
    pub fn contrast_holds(&self) -> bool {
        self.ring.passed && !self.star.passed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: ExperimentSpec,
    pub seed: u64,
    pub rows: Vec<BenchRow>,
    pub decouple: Option<DecoupleReport>,
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
}

pub fn run_experiment(spec: &ExperimentSpec, seed: u64) -> Result<BenchReport, ExperimentError> {
    if spec.rounds == 0 || spec.repetitions == 0 {
        return Err(NetsimError::Config("rounds and repetitions must be positive".into()).into());
    }
    let (rows, decouple) = match spec.name {
        ExperimentName::Decouple => (Vec::new(), Some(decouple(spec, seed)?)),
        ExperimentName::Latency | ExperimentName::TokenLength => {
            let rows = spec
                .n_values
                .par_iter()
                .map(|&n| point(spec, seed, &format!("n{n}"), split(&device_ids(n), 1)))
                .collect::<Result<Vec<_>, _>>()?;
            (rows, None)
        }
        ExperimentName::ParallelRings => {
            let ids = device_ids(spec.first_n()?);
            let rows = spec
                .ring_counts
                .par_iter()
                .map(|&r| {
                    if r == 0 || r > ids.len() {
                        return Err(NetsimError::Config(format!("cannot split {} devices into {r} rings", ids.len())));
                    }
                    point(spec, seed, &format!("rings{r}"), split(&ids, r))
                })
                .collect::<Result<Vec<_>, _>>()?;
            (rows, None)
        }
        ExperimentName::Skew => (skew(spec, seed)?, None),
    };
    Ok(BenchReport {
        spec: spec.clone(),
        seed,
        rows,
        decouple,
    })
}

pub fn device_ids(n: usize) -> Vec<DeviceId> {
    (1..=n).map(|i| DeviceId::new(format!("D{i}"))).collect()
}

/// Contiguous, near-equal chunks.
pub fn split(ids: &[DeviceId], rings: usize) -> Vec<Vec<DeviceId>> {
    let base = ids.len() / rings;
    let extra = ids.len() % rings;
    let mut out = Vec::with_capacity(rings);
    let mut start = 0;
    for k in 0..rings {
        let len = base + usize::from(k < extra);
        out.push(ids[start..start + len].to_vec());
        start += len;
    }
    out
}

fn sweep_config(spec: &ExperimentSpec, seed: u64, rings: Vec<RingSpec>, devices: Vec<DeviceSpec>) -> SimConfig {
    SimConfig {
        seed,
        duration_ms: 86_400_000,
        max_rounds: Some(spec.rounds),
        latency: spec.latency,
        devices,
        rings,
        ..SimConfig::single_ring(&[], 0)
    }
}

fn ring_specs(spec: &ExperimentSpec, groups: Vec<Vec<DeviceId>>, sub_field: Option<usize>) -> Vec<RingSpec> {
    groups
        .into_iter()
        .enumerate()
        .map(|(k, devices)| RingSpec {
            command_capacity: spec.command_capacity,
            sub_field_bytes: sub_field,
            ..RingSpec::new(format!("ring{k}"), devices)
        })
        .collect()
}

/// Mean and variance of round latency across every ring and seed, and the
/// mean sealed token length.
fn point(spec: &ExperimentSpec, seed: u64, label: &str, groups: Vec<Vec<DeviceId>>) -> Result<BenchRow, NetsimError> {
    let n = groups.iter().map(Vec::len).sum();
    let rings = groups.len();
    let ring_size = groups.iter().map(Vec::len).max().unwrap_or(0);
    let specs = ring_specs(spec, groups, Some(spec.sub_field_bytes));
    let outputs = (0..spec.repetitions)
        .map(|rep| netsim::run(&sweep_config(spec, seed + rep, specs.clone(), Vec::new())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(row(label, n, rings, ring_size, &outputs, |_| true))
}

fn row(
    label: &str,
    n: usize,
    rings: usize,
    ring_size: usize,
    outputs: &[SimOutput],
    keep: impl Fn(&str) -> bool,
) -> BenchRow {
    let rounds: Vec<_> = outputs.iter().flat_map(|o| o.rounds.iter()).filter(|r| keep(&r.ring_id)).collect();
    let latencies: Vec<f64> = rounds.iter().map(|r| r.latency_us() as f64 / 1000.0).collect();
    let lengths: Vec<f64> = rounds.iter().map(|r| r.sealed_len as f64).collect();
    let (mean_latency_ms, var_latency_ms2) = netsim::mean_var(&latencies);
    BenchRow {
        label: label.to_string(),
        n,
        rings,
        ring_size,
        rounds: rounds.len(),
        mean_latency_ms,
        var_latency_ms2,
        mean_token_bytes: netsim::mean_var(&lengths).0,
    }
}

/// Rows `mixed` (every device in one ring), `non_skew` and `skew` (the
/// separated rings).
fn skew(spec: &ExperimentSpec, seed: u64) -> Result<Vec<BenchRow>, NetsimError> {
    let n = spec.first_n()?;
    let skewed = skew_count(n, spec.skew_ratio);
    let ids = device_ids(n);
    let kinds: Vec<(DeviceId, DeviceKind)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), if i >= n - skewed { DeviceKind::Skew } else { DeviceKind::NonSkew }))
        .collect();
    let devices: Vec<DeviceSpec> = kinds
        .iter()
        .map(|(id, kind)| DeviceSpec {
            kind: *kind,
            ..DeviceSpec::new(id.clone())
        })
        .collect();
    let with_capacity = |mut r: RingSpec| {
        r.command_capacity = spec.command_capacity;
        r
    };
    let mixed = vec![with_capacity(RingSpec::new("mixed", ids.clone()))];
    let partition = partition_by_skew(&kinds);
    let separated: Vec<RingSpec> = partition.non_skew.into_iter().chain(partition.skew).map(with_capacity).collect();
    let non_skew_ids: Vec<String> = separated
        .iter()
        .filter(|r| r.devices.iter().all(|d| kinds.iter().any(|(k, kind)| k == d && *kind == DeviceKind::NonSkew)))
        .map(|r| r.ring_id.clone())
        .collect();

    let configs = [mixed, separated];
    let outputs = configs
        .par_iter()
        .map(|rings| {
            (0..spec.repetitions)
                .map(|rep| netsim::run(&sweep_config(spec, seed + rep, rings.clone(), devices.clone())))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let is_non_skew = |id: &str| non_skew_ids.iter().any(|r| r == id);
    let mut rows = vec![row("mixed", n, 1, n, &outputs[0], |_| true)];
    if n - skewed > 0 {
        rows.push(row("non_skew", n - skewed, 1, n - skewed, &outputs[1], is_non_skew));
    }
    if skewed > 0 {
        let skew_rings = configs[1].len() - non_skew_ids.len();
        rows.push(row("skew", skewed, skew_rings, skewed, &outputs[1], |id| !is_non_skew(id)));
    }
    Ok(rows)
}

/// Set and Read commands, one every 10 s, against D1..D3.
pub fn decouple_workload() -> Vec<StarCommand> {
    [("D1", StarAction::Set), ("D2", StarAction::Set), ("D2", StarAction::Read), ("D3", StarAction::Read)]
        .into_iter()
        .enumerate()
        .map(|(k, (device, action))| StarCommand {
            device: device.into(),
            action,
            at_us: 5_000_000 + k as u64 * 10_000_000,
        })
        .collect()
}

/// Bytes a device sends back for a Read.
pub const READ_PAYLOAD_BYTES: usize = 32;

/// A ring config that carries `workload`: a Set becomes a one-command
/// order, a Read becomes an upload from that device.
pub fn ring_config_for(workload: &[StarCommand], devices: &[DeviceId], duration_ms: u64, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::single_ring(&[], duration_ms);
    cfg.seed = seed;
    cfg.rings = vec![RingSpec::new("ring0", devices.to_vec())];
    for cmd in workload {
        match cmd.action {
            StarAction::Set => cfg.orders.push(OrderSpec {
                at_ms: cmd.at_us / 1000,
                schedule: ScheduleSpec {
                    chains: vec![vec![CommandSpec {
                        device: cmd.device.to_string(),
                        state: SwitchState::On,
                        exec_time_ms: 100,
                    }]],
                    epoch_ms: 0,
                },
            }),
            StarAction::Read => cfg.uploads.push(UploadSpec {
                device: cmd.device.clone(),
                at_ms: cmd.at_us / 1000,
                bytes: READ_PAYLOAD_BYTES,
            }),
        }
    }
    cfg
}

/// The four traces compared by the decoupling experiment, each with the
/// span of time it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupleTraces {
    pub ring_active: ChannelTrace,
    pub ring_idle: ChannelTrace,
    pub star_active: ChannelTrace,
    pub star_idle: ChannelTrace,
    /// Token period of the ring, used as the comparison window.
    pub window_us: u64,
}

pub fn decouple_traces(spec: &ExperimentSpec, seed: u64) -> Result<DecoupleTraces, NetsimError> {
    let workload = decouple_workload();
    let duration_ms = workload.last().map_or(0, |c| c.at_us / 1000) + 10_000;
    let ids = device_ids(spec.first_n()?.max(3));
    let configure = |workload: &[StarCommand]| {
        let mut cfg = ring_config_for(workload, &ids, duration_ms, seed);
        cfg.latency = spec.latency;
        cfg.rings[0].command_capacity = spec.command_capacity;
        cfg.rings[0].sub_field_bytes = Some(spec.sub_field_bytes);
        cfg
    };
    let active = netsim::run(&configure(&workload))?;
    let idle = netsim::run(&configure(&[]))?;
    let window_us = match active.rings[0].period {
        netsim::TokenPeriod::Fixed { slot_us } | netsim::TokenPeriod::Random { slot_us } => slot_us,
    };
    let ring_span = active.duration_us.max(idle.duration_us);
    let star_span = duration_ms * 1000;
    Ok(DecoupleTraces {
        ring_active: ChannelTrace::new(active.events, ring_span),
        ring_idle: ChannelTrace::new(idle.events, ring_span),
        star_active: ChannelTrace::new(baseline_star_run(&workload, &spec.latency, seed), star_span),
        star_idle: ChannelTrace::new(baseline_star_run(&[], &spec.latency, seed), star_span),
        window_us,
    })
}

fn decouple(spec: &ExperimentSpec, seed: u64) -> Result<DecoupleReport, ExperimentError> {
    let traces = decouple_traces(spec, seed)?;
    let compare = |a, b| indistinguishability_test(a, b, traces.window_us, DEFAULT_KS_THRESHOLD);
    Ok(DecoupleReport {
        ring: compare(&traces.ring_active, &traces.ring_idle)?,
        star: compare(&traces.star_active, &traces.star_idle)?,
    })
}

/// Least-squares line through `(x, y)` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub max_abs_residual: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - (intercept + slope * x)).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    Some(LinearFit {
        slope,
        intercept,
        r_squared: if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot },
        max_abs_residual: residuals.iter().fold(0.0, |m, r| m.max(r.abs())),
    })
}

/// Writes the rows as plot-ready CSV.
pub fn write_rows_csv(rows: &[BenchRow], path: &std::path::Path) -> Result<(), std::io::Error> {
    let mut writer = csv::Writer::from_path(path).map_err(std::io::Error::other)?;
    for row in rows {
        writer.serialize(row).map_err(std::io::Error::other)?;
    }
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_of_exact_line() {
        let fit = linear_fit(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 1.0).abs() < 1e-12);
        assert!(fit.max_abs_residual < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
        assert!(linear_fit(&[2.0, 2.0], &[1.0, 3.0]).is_none());
    }

    #[test]
    fn split_is_contiguous_and_balanced() {
        let ids = device_ids(75);
        let parts = split(&ids, 2);
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), [38, 37]);
        assert_eq!(parts.concat(), ids);
        assert_eq!(split(&ids, 3).iter().map(Vec::len).collect::<Vec<_>>(), [25, 25, 25]);
    }

    #[test]
    fn spec_json_fills_defaults() {
        let spec = ExperimentSpec::from_json(r#"{"name": "token_length", "rounds": 2}"#).unwrap();
        assert_eq!(spec.n_values, [3, 27, 51, 63, 75]);
        assert_eq!(spec.rounds, 2);
        assert!(ExperimentSpec::from_json(r#"{"name": "nope"}"#).is_err());
        assert!(ExperimentSpec::from_json(r#"{"name": "skew", "bogus": 1}"#).is_err());
    }

    #[test]
    fn workload_maps_onto_orders_and_uploads() {
        let cfg = ring_config_for(&decouple_workload(), &device_ids(3), 50_000, 1);
        assert_eq!(cfg.orders.len(), 2);
        assert_eq!(cfg.uploads.len(), 2);
        assert_eq!(cfg.orders[1].at_ms, 15_000);
    }
}
