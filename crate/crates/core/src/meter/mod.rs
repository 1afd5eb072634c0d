//! Batch-scoped energy metering.
//!
//! A session covers one batch of executions. CPU and GPU energy come from a
//! per-component backend; RAM energy uses a fixed watts-per-GB model.
//! Emissions are total energy times a configured carbon intensity.

mod log;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::gateway::TokenStats;
use crate::strategy::StrategyId;

pub use log::{append_log, read_log, LogError, LOG_HEADER};

/// Joules per kWh.
pub const J_PER_KWH: f64 = 3.6e6;
/// Watts drawn per 8 GB of RAM.
pub const RAM_WATTS_PER_8GB: f64 = 3.0;

#[derive(Debug, Error)]
pub enum MeterError {
    #[error("a metering session is already open")]
    NestedSession,
    #[error("{component} backend unavailable: {reason}")]
    BackendUnavailable { component: &'static str, reason: String },
    #[error("invalid meter config: {0}")]
    Config(String),
    #[error("session for batch {0} has zero duration")]
    ZeroDuration(u32),
    #[error("sampler thread panicked")]
    SamplerPanicked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ComponentBackend {
    /// Cumulative microjoule counter such as a powercap `energy_uj` file.
    CounterFile {
        path: PathBuf,
        /// Counter width; when absent a `max_energy_range_uj` sibling is
        /// consulted and 32 bits is assumed after that.
        #[serde(default)]
        counter_bits: Option<u32>,
    },
    /// Command printing instantaneous watts, one number per line (summed).
    PowerPoll {
        command: Vec<String>,
    },
    Constant {
        watts: f64,
    },
    /// Constant draw on the virtual clock.
    Simulated {
        watts: f64,
    },
}

impl ComponentBackend {
    pub fn label(&self) -> &'static str {
        match self {
            ComponentBackend::CounterFile { .. } => "counter_file",
            ComponentBackend::PowerPoll { .. } => "power_poll",
            ComponentBackend::Constant { .. } => "constant",
            ComponentBackend::Simulated { .. } => "simulated",
        }
    }

    fn needs_wall_clock(&self) -> bool {
        matches!(
            self,
            ComponentBackend::CounterFile { .. } | ComponentBackend::PowerPoll { .. }
        )
    }
}

fn default_interval() -> f64 {
    1.0
}
fn default_intensity() -> f64 {
    0.475
}
fn default_ram_gb() -> f64 {
    16.0
}
fn default_tdp_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeterBackendConfig {
    pub cpu: ComponentBackend,
    /// Absent means a constant fallback of `gpu_tdp_watts * gpu_tdp_fraction`.
    #[serde(default)]
    pub gpu: Option<ComponentBackend>,
    #[serde(default = "default_interval")]
    pub sampling_interval: f64,
    /// kg CO2-eq per kWh.
    #[serde(default = "default_intensity")]
    pub carbon_intensity: f64,
    #[serde(default = "default_ram_gb")]
    pub ram_gb: f64,
    #[serde(default)]
    pub gpu_tdp_watts: f64,
    #[serde(default = "default_tdp_fraction")]
    pub gpu_tdp_fraction: f64,
}

impl MeterBackendConfig {
    pub fn simulated(cpu_watts: f64, gpu_watts: f64, ram_gb: f64) -> Self {
        MeterBackendConfig {
            cpu: ComponentBackend::Simulated { watts: cpu_watts },
            gpu: Some(ComponentBackend::Simulated { watts: gpu_watts }),
            sampling_interval: default_interval(),
            carbon_intensity: default_intensity(),
            ram_gb,
            gpu_tdp_watts: 0.0,
            gpu_tdp_fraction: default_tdp_fraction(),
        }
    }

    pub fn ram_watts(&self) -> f64 {
        RAM_WATTS_PER_8GB * self.ram_gb / 8.0
    }

    fn gpu_backend(&self) -> (ComponentBackend, &'static str) {
        match &self.gpu {
            Some(b) => (b.clone(), b.label()),
            None => (
                ComponentBackend::Constant {
                    watts: self.gpu_tdp_watts * self.gpu_tdp_fraction,
                },
                "constant_fallback",
            ),
        }
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self.cpu, ComponentBackend::Simulated { .. })
            || matches!(self.gpu, Some(ComponentBackend::Simulated { .. }))
    }

    pub fn validate(&self, clock_simulated: bool) -> Result<(), MeterError> {
        let bad = |m: String| Err(MeterError::Config(m));
        if !(self.carbon_intensity > 0.0 && self.carbon_intensity.is_finite()) {
            return bad(format!("carbon_intensity {} must be > 0", self.carbon_intensity));
        }
        if !(self.sampling_interval > 0.0 && self.sampling_interval.is_finite()) {
            return bad(format!("sampling_interval {} must be > 0", self.sampling_interval));
        }
        if !(self.ram_gb >= 0.0) || !(self.gpu_tdp_watts >= 0.0) {
            return bad("ram_gb and gpu_tdp_watts must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.gpu_tdp_fraction) {
            return bad(format!("gpu_tdp_fraction {} must be in [0, 1]", self.gpu_tdp_fraction));
        }
        let parts = [("cpu", Some(&self.cpu)), ("gpu", self.gpu.as_ref())];
        for (name, b) in parts {
            let Some(b) = b else { continue };
            match b {
                ComponentBackend::Constant { watts } | ComponentBackend::Simulated { watts }
                    if !(*watts >= 0.0 && watts.is_finite()) =>
                {
                    return bad(format!("{name} watts {watts} must be >= 0"));
                }
                ComponentBackend::PowerPoll { command } if command.is_empty() => {
                    return bad(format!("{name} poll command is empty"));
                }
                ComponentBackend::CounterFile {
                    counter_bits: Some(bits),
                    ..
                } if !(1..=64).contains(bits) => {
                    return bad(format!("{name} counter_bits {bits} must be in 1..=64"));
                }
                _ => {}
            }
            if matches!(b, ComponentBackend::Simulated { .. }) && !clock_simulated {
                return bad(format!("{name} backend is simulated but the clock is not"));
            }
            if b.needs_wall_clock() && clock_simulated {
                return bad(format!("{name} backend {} needs the wall clock", b.label()));
            }
        }
        Ok(())
    }
}

/// Counter difference modulo `modulus` (the counter's wrap point).
pub fn counter_delta(prev: u64, cur: u64, modulus: u128) -> u64 {
    if cur >= prev {
        cur - prev
    } else {
        (modulus - u128::from(prev) + u128::from(cur)) as u64
    }
}

/// Trapezoidal integral of `(t seconds, watts)` samples, in joules.
pub fn trapezoid_joules(samples: &[(f64, f64)]) -> f64 {
    samples
        .windows(2)
        .map(|w| (w[0].1 + w[1].1) / 2.0 * (w[1].0 - w[0].0))
        .sum()
}

/// Identifies the batch a session meters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLabel {
    pub run_id: String,
    pub batch_id: u32,
    pub model: String,
    pub strategy: StrategyId,
}

/// One row of a batch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeasurement {
    pub timestamp: String,
    pub run_id: String,
    pub batch_id: u32,
    pub model: String,
    pub strategy: StrategyId,
    /// Seconds.
    pub duration: f64,
    /// kg CO2-eq.
    pub emissions: f64,
    /// kWh.
    pub cpu_energy: f64,
    pub gpu_energy: f64,
    pub ram_energy: f64,
    pub energy_consumed: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_tokens: u64,
    pub n_executions: u32,
    pub cpu_backend: String,
    pub gpu_backend: String,
}

impl BatchMeasurement {
    pub fn component_sum(&self) -> f64 {
        self.cpu_energy + self.gpu_energy + self.ram_energy
    }
}

enum ComponentState {
    Counter {
        path: PathBuf,
        modulus: u128,
        last: u64,
        acc_uj: u128,
    },
    Poll {
        command: Vec<String>,
        samples: Vec<(f64, f64)>,
    },
    Fixed {
        watts: f64,
    },
}

fn read_counter(path: &Path) -> Result<u64, String> {
    let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    raw.trim()
        .parse()
        .map_err(|e| format!("{}: not a counter value {:?}: {e}", path.display(), raw.trim()))
}

fn counter_modulus(path: &Path, bits: Option<u32>) -> u128 {
    if let Some(b) = bits {
        return 1u128 << b;
    }
    let sibling = path.with_file_name("max_energy_range_uj");
    match read_counter(&sibling) {
        Ok(max) => u128::from(max) + 1,
        Err(_) => 1u128 << 32,
    }
}

fn poll_watts(command: &[String]) -> Result<f64, String> {
    let out = Command::new(&command[0])
        .args(&command[1..])
        .output()
        .map_err(|e| format!("{:?}: {e}", command[0]))?;
    if !out.status.success() {
        return Err(format!(
            "{:?} exited with {}: {}",
            command[0],
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let mut total = 0.0;
    let mut seen = false;
    for line in stdout.lines() {
        let t = line.trim().trim_end_matches('W').trim();
        if t.is_empty() {
            continue;
        }
        let w: f64 = t
            .parse()
            .map_err(|_| format!("{:?} printed a non-numeric line {line:?}", command[0]))?;
        total += w;
        seen = true;
    }
    if !seen {
        return Err(format!("{:?} printed no readings", command[0]));
    }
    Ok(total)
}

impl ComponentState {
    fn open(component: &'static str, backend: &ComponentBackend, t: f64) -> Result<Self, MeterError> {
        let unavailable = |reason| MeterError::BackendUnavailable { component, reason };
        Ok(match backend {
            ComponentBackend::CounterFile { path, counter_bits } => ComponentState::Counter {
                last: read_counter(path).map_err(unavailable)?,
                modulus: counter_modulus(path, *counter_bits),
                path: path.clone(),
                acc_uj: 0,
            },
            ComponentBackend::PowerPoll { command } => ComponentState::Poll {
                samples: vec![(t, poll_watts(command).map_err(unavailable)?)],
                command: command.clone(),
            },
            ComponentBackend::Constant { watts } | ComponentBackend::Simulated { watts } => {
                ComponentState::Fixed { watts: *watts }
            }
        })
    }

    fn needs_sampler(&self) -> bool {
        !matches!(self, ComponentState::Fixed { .. })
    }

    fn sample(&mut self, t: f64) -> Result<(), String> {
        match self {
            ComponentState::Counter {
                path,
                modulus,
                last,
                acc_uj,
            } => {
                let cur = read_counter(path)?;
                *acc_uj += u128::from(counter_delta(*last, cur, *modulus));
                *last = cur;
            }
            ComponentState::Poll { command, samples } => samples.push((t, poll_watts(command)?)),
            ComponentState::Fixed { .. } => {}
        }
        Ok(())
    }

    fn kwh(&self, duration: f64) -> f64 {
        match self {
            ComponentState::Counter { acc_uj, .. } => *acc_uj as f64 / 1e6 / J_PER_KWH,
            ComponentState::Poll { samples, .. } => {
                if samples.len() == 1 {
                    samples[0].1 * duration / J_PER_KWH
                } else {
                    trapezoid_joules(samples) / J_PER_KWH
                }
            }
            ComponentState::Fixed { watts } => watts * duration / J_PER_KWH,
        }
    }
}

struct Components {
    cpu: ComponentState,
    gpu: ComponentState,
}

impl Components {
    fn sample(&mut self, t: f64) -> Result<(), MeterError> {
        self.cpu.sample(t).map_err(|reason| MeterError::BackendUnavailable {
            component: "cpu",
            reason,
        })?;
        self.gpu.sample(t).map_err(|reason| MeterError::BackendUnavailable {
            component: "gpu",
            reason,
        })
    }
}

type SamplerResult = Result<Components, MeterError>;

/// Owns the backend config and enforces a single open session.
pub struct EnergyMeter {
    config: MeterBackendConfig,
    clock: SharedClock,
    open: Arc<AtomicBool>,
}

impl EnergyMeter {
    pub fn new(config: MeterBackendConfig, clock: SharedClock) -> Result<Self, MeterError> {
        config.validate(clock.is_simulated())?;
        Ok(EnergyMeter {
            config,
            clock,
            open: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn config(&self) -> &MeterBackendConfig {
        &self.config
    }

    /// Labels written to the `cpu_backend` and `gpu_backend` columns.
    pub fn backend_labels(&self) -> (&'static str, &'static str) {
        (self.config.cpu.label(), self.config.gpu_backend().1)
    }

    /// Probes every backend once without holding a session.
    pub fn probe(&self) -> Result<(), MeterError> {
        let t = self.clock.now();
        ComponentState::open("cpu", &self.config.cpu, t)?;
        ComponentState::open("gpu", &self.config.gpu_backend().0, t)?;
        Ok(())
    }

    pub fn open_session(&self, label: BatchLabel) -> Result<MeterSession<'_>, MeterError> {
        if self.open.swap(true, Ordering::SeqCst) {
            return Err(MeterError::NestedSession);
        }
        let release = SessionGuard(self.open.clone());
        let start = self.clock.now();
        let (gpu_backend, gpu_label) = self.config.gpu_backend();
        let components = Components {
            cpu: ComponentState::open("cpu", &self.config.cpu, start)?,
            gpu: ComponentState::open("gpu", &gpu_backend, start)?,
        };
        let sampler = if components.cpu.needs_sampler() || components.gpu.needs_sampler() {
            let (stop_tx, stop_rx) = mpsc::channel::<()>();
            let clock = self.clock.clone();
            let interval = Duration::from_secs_f64(self.config.sampling_interval);
            let mut comps = components;
            let handle = std::thread::spawn(move || -> SamplerResult {
                loop {
                    match stop_rx.recv_timeout(interval) {
                        Err(mpsc::RecvTimeoutError::Timeout) => comps.sample(clock.now())?,
                        _ => return Ok(comps),
                    }
                }
            });
            Sampling::Thread { stop_tx, handle }
        } else {
            Sampling::Inline(components)
        };
        Ok(MeterSession {
            meter: self,
            label,
            start,
            gpu_label,
            sampling: Some(sampler),
            _guard: release,
        })
    }
}

struct SessionGuard(Arc<AtomicBool>);

impl Drop for SessionGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

enum Sampling {
    Inline(Components),
    Thread {
        stop_tx: mpsc::Sender<()>,
        handle: JoinHandle<SamplerResult>,
    },
}

impl Sampling {
    fn stop(self) -> SamplerResult {
        match self {
            Sampling::Inline(c) => Ok(c),
            Sampling::Thread { stop_tx, handle } => {
                let _ = stop_tx.send(());
                handle.join().map_err(|_| MeterError::SamplerPanicked)?
            }
        }
    }
}

/// An open metering session. Dropping it without closing discards it.
pub struct MeterSession<'m> {
    meter: &'m EnergyMeter,
    label: BatchLabel,
    start: f64,
    gpu_label: &'static str,
    sampling: Option<Sampling>,
    _guard: SessionGuard,
}

impl MeterSession<'_> {
    pub fn label(&self) -> &BatchLabel {
        &self.label
    }

    pub fn elapsed(&self) -> f64 {
        self.meter.clock.now() - self.start
    }

    pub fn close(mut self, tokens: TokenStats, n_executions: u32) -> Result<BatchMeasurement, MeterError> {
        let mut comps = self.sampling.take().expect("sampling present until close").stop()?;
        let end = self.meter.clock.now();
        comps.sample(end)?;
        let duration = end - self.start;
        if duration <= 0.0 {
            return Err(MeterError::ZeroDuration(self.label.batch_id));
        }
        let cfg = &self.meter.config;
        if duration < cfg.sampling_interval {
            ::log::warn!(
                "batch {} of {}/{} lasted {duration:.3} s, shorter than the {} s sampling interval",
                self.label.batch_id,
                self.label.model,
                self.label.strategy,
                cfg.sampling_interval
            );
        }
        let cpu_energy = comps.cpu.kwh(duration);
        let gpu_energy = comps.gpu.kwh(duration);
        let ram_energy = cfg.ram_watts() * duration / J_PER_KWH;
        let energy_consumed = cpu_energy + gpu_energy + ram_energy;
        Ok(BatchMeasurement {
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            run_id: self.label.run_id.clone(),
            batch_id: self.label.batch_id,
            model: self.label.model.clone(),
            strategy: self.label.strategy,
            duration,
            emissions: cfg.carbon_intensity * energy_consumed,
            cpu_energy,
            gpu_energy,
            ram_energy,
            energy_consumed,
            input_tokens: tokens.input_tokens,
            output_tokens: tokens.output_tokens,
            total_tokens: tokens.total_tokens,
            n_executions,
            cpu_backend: cfg.cpu.label().to_string(),
            gpu_backend: self.gpu_label.to_string(),
        })
    }

    /// Stops sampling and discards the batch.
    pub fn abort(mut self) {
        if let Some(s) = self.sampling.take() {
            let _ = s.stop();
        }
    }
}

impl Drop for MeterSession<'_> {
    fn drop(&mut self) {
        if let Some(Sampling::Thread { stop_tx, .. }) = &self.sampling {
            let _ = stop_tx.send(());
        }
    }
}
