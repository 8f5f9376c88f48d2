//! Python bindings for the token-ring simulator.

use num_bigint::BigUint;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tokenring::command::{Command, SwitchState};
use tokenring::experiments::{run_experiment, ExperimentSpec};
use tokenring::netsim::{self, verify_run, RunSummary, SimConfig, SimOutput};
use tokenring::observer::{self, ChannelEvent, ChannelTrace};
use tokenring::schedule::{self, Schedule};
use tokenring::timelock::{self, difficulty as timelock_difficulty};
use tokenring::token::TokenLayout;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_state(state: &str) -> PyResult<SwitchState> {
    match state {
        "on" => Ok(SwitchState::On),
        "off" => Ok(SwitchState::Off),
        other => Err(PyValueError::new_err(format!("state must be 'on' or 'off', got {other:?}"))),
    }
}

fn state_name(state: SwitchState) -> &'static str {
    match state {
        SwitchState::On => "on",
        SwitchState::Off => "off",
    }
}

/// RSA modulus, base and trapdoor for time-lock puzzles.
#[pyclass(name = "PuzzleParams", frozen)]
struct PyPuzzleParams {
    inner: timelock::PuzzleParams,
}

#[pymethods]
impl PyPuzzleParams {
    /// Deterministic parameters with primes of `prime_bits` bits.
    #[new]
    #[pyo3(signature = (prime_bits = 512, seed = 0))]
    fn new(prime_bits: u64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: timelock::param_gen(prime_bits, seed).map_err(value_err)? })
    }

    #[staticmethod]
    fn from_primes(p: BigUint, q: BigUint, a: BigUint) -> PyResult<Self> {
        Ok(Self { inner: timelock::PuzzleParams::from_primes(p, q, a).map_err(value_err)? })
    }

    #[getter]
    fn n(&self) -> BigUint {
        self.inner.n().clone()
    }

    #[getter]
    fn a(&self) -> BigUint {
        self.inner.a().clone()
    }

    #[getter]
    fn phi_n(&self) -> BigUint {
        self.inner.phi_n().clone()
    }

    /// `a^(2^t_hat) mod n` through the trapdoor.
    fn fast_eval(&self, t_hat: u64) -> BigUint {
        timelock::fast_eval(&self.inner, t_hat)
    }

    fn __repr__(&self) -> String {
        format!("PuzzleParams(n_bits={})", self.inner.n().bits())
    }
}

/// A sealed command that opens after `t_hat` sequential squarings.
#[pyclass(name = "Puzzle", frozen)]
struct PyPuzzle {
    inner: timelock::Puzzle,
}

#[pymethods]
impl PyPuzzle {
    #[new]
    #[pyo3(signature = (params, t_hat, device, state, exec_time_us, seed = 0, key = None))]
    fn new(
        params: &PyPuzzleParams,
        t_hat: u64,
        device: &str,
        state: &str,
        exec_time_us: u64,
        seed: u64,
        key: Option<BigUint>,
    ) -> PyResult<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let command = Command::new(device, parse_state(state)?, exec_time_us);
        let key = key.unwrap_or_else(|| timelock::random_key(&params.inner, &mut rng));
        let inner = timelock::puzzle_gen(&params.inner, t_hat, &command, &key, u64::MAX, &mut rng).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> BigUint {
        self.inner.n.clone()
    }

    #[getter]
    fn a(&self) -> BigUint {
        self.inner.a.clone()
    }

    #[getter]
    fn t_hat(&self) -> u64 {
        self.inner.t_hat
    }

    #[getter]
    fn e_k(&self) -> BigUint {
        self.inner.e_k.clone()
    }

    /// Solves by repeated squaring. Returns a dict with `key`, `device`,
    /// `state`, `exec_time_us`, `squarings` and `solution`.
    fn solve<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let receipt = py.detach(|| self.inner.solve()).map_err(value_err)?;
        let out = pyo3::types::PyDict::new(py);
        out.set_item("key", receipt.key)?;
        out.set_item("device", receipt.command.device_id.as_str())?;
        out.set_item("state", state_name(receipt.command.state))?;
        out.set_item("exec_time_us", receipt.command.exec_time_us)?;
        out.set_item("squarings", receipt.squarings_performed)?;
        out.set_item("solution", receipt.solution)?;
        Ok(out)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: timelock::Puzzle::from_bytes(data).map_err(value_err)? })
    }
}

/// Squarings needed for a `t_prime_secs` delay at `squarings_per_sec`.
#[pyfunction]
fn difficulty(squarings_per_sec: f64, t_prime_secs: f64) -> PyResult<u64> {
    timelock_difficulty(squarings_per_sec, t_prime_secs).map_err(value_err)
}

/// Disjoint chains of device commands.
#[pyclass(name = "Schedule", frozen)]
struct PySchedule {
    inner: Schedule,
}

#[pymethods]
impl PySchedule {
    /// Parses `{"chains": [[{"device": ..., "state": ..., "exec_time_ms": ...}]]}`.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: Schedule::from_json(text).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn devices(&self) -> Vec<String> {
        self.inner.devices().into_iter().map(|d| d.as_str().to_owned()).collect()
    }

    /// Deterministic linear extension used for the ring order.
    fn chain(&self) -> PyResult<Vec<String>> {
        let order = schedule::chain(&self.inner).map_err(value_err)?;
        Ok(order.into_iter().map(|d| d.as_str().to_owned()).collect())
    }

    fn linear_extensions(&self) -> PyResult<Vec<Vec<String>>> {
        let all = schedule::linear_extensions(&self.inner).map_err(value_err)?;
        Ok(all.into_iter().map(|ext| ext.into_iter().map(|d| d.as_str().to_owned()).collect()).collect())
    }

    /// Devices that sit in a chain of two or more commands.
    fn comparable_count(&self) -> usize {
        self.inner.comparable_count()
    }
}

/// Byte length of a sealed token for the given field capacities.
#[pyfunction]
fn sealed_token_len(command_capacity: usize, data_capacity: usize, device_count: u16) -> usize {
    TokenLayout { command_capacity, data_capacity, device_count }.sealed_len()
}

/// Outcome of one simulation run.
#[pyclass(name = "SimResult", frozen)]
struct PySimResult {
    output: SimOutput,
    seed: u64,
}

#[pymethods]
impl PySimResult {
    /// Channel events as `(time_us, sender, receiver, bytes)` tuples.
    fn events(&self) -> Vec<(u64, String, String, usize)> {
        self.output
            .events
            .iter()
            .map(|e| (e.time_us, e.sender.clone(), e.receiver.clone(), e.bytes))
            .collect()
    }

    /// Rounds as `(ring_id, round, t_beg_us, t_end_us, latency_us, sealed_len)`.
    fn rounds(&self) -> Vec<(String, u64, u64, u64, u64, usize)> {
        self.output
            .rounds
            .iter()
            .map(|r| (r.ring_id.clone(), r.round, r.t_beg_us, r.t_end_us, r.latency_us(), r.sealed_len))
            .collect()
    }

    #[getter]
    fn duration_us(&self) -> u64 {
        self.output.duration_us
    }

    fn summary_json(&self) -> String {
        serde_json::to_string(&RunSummary::from_output(&self.output, self.seed)).expect("summary serializes")
    }

    /// True iff every logged execution matches a signed order and its puzzle.
    fn verify(&self) -> PyResult<bool> {
        match verify_run(&self.output.owner, &self.output.log) {
            Ok(ok) => Ok(ok),
            Err(netsim::NetsimError::Incomplete(_)) => Ok(false),
            Err(e) => Err(value_err(e)),
        }
    }

    /// Writes the trace, round table, summary, execution log and owner state.
    fn write(&self, dir: &str) -> PyResult<()> {
        netsim::write_outputs(&self.output, self.seed, std::path::Path::new(dir))
            .map(|_| ())
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }
}

/// Runs a simulation from a JSON config; `seed` overrides the config seed.
#[pyfunction]
#[pyo3(signature = (config_json, seed = None))]
fn run_simulation(py: Python<'_>, config_json: &str, seed: Option<u64>) -> PyResult<PySimResult> {
    let mut config = SimConfig::from_json(config_json).map_err(value_err)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let output = py.detach(|| netsim::run(&config)).map_err(value_err)?;
    Ok(PySimResult { output, seed: config.seed })
}

fn to_events(raw: Vec<(u64, String, String, usize)>) -> Vec<ChannelEvent> {
    raw.into_iter()
        .map(|(time_us, sender, receiver, bytes)| ChannelEvent { time_us, sender, receiver, bytes })
        .collect()
}

/// Compares two event lists window by window; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (active, idle, duration_us, window_us = 1_000_000, ks_threshold = observer::DEFAULT_KS_THRESHOLD))]
fn indistinguishability_test(
    active: Vec<(u64, String, String, usize)>,
    idle: Vec<(u64, String, String, usize)>,
    duration_us: u64,
    window_us: u64,
    ks_threshold: f64,
) -> PyResult<String> {
    let a = ChannelTrace::new(to_events(active), duration_us);
    let b = ChannelTrace::new(to_events(idle), duration_us);
    let report = observer::indistinguishability_test(&a, &b, window_us, ks_threshold).map_err(value_err)?;
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

/// Runs an experiment sweep from a JSON spec; returns the report as JSON.
#[pyfunction]
#[pyo3(name = "bench", signature = (spec_json, seed = 0))]
fn run_bench(py: Python<'_>, spec_json: &str, seed: u64) -> PyResult<String> {
    let spec = ExperimentSpec::from_json(spec_json).map_err(value_err)?;
    let report = py.detach(|| run_experiment(&spec, seed)).map_err(value_err)?;
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

#[pymodule]
fn _tokenring(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPuzzleParams>()?;
    m.add_class::<PyPuzzle>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PySimResult>()?;
    m.add_function(wrap_pyfunction!(difficulty, m)?)?;
    m.add_function(wrap_pyfunction!(sealed_token_len, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(indistinguishability_test, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    Ok(())
}
