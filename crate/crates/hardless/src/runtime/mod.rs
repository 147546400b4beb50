//! Runtime instances: warm-capable executors bound to one accelerator slot.
//!
//! An instance walks `Starting -> Idle -> (Busy <-> Idle)* -> Stopped` and
//! holds its accelerator slot for that whole span. Two backends exist: the
//! deterministic simulated backend (latencies sampled from a seeded
//! log-normal around a configured median) and an external-process backend
//! that keeps a child process warm between invocations.

pub mod process;

use crate::clock::TimeMs;
use crate::invocation::{AcceleratorDescriptor, Invocation, InvocationId, RuntimeSpec, SlotError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stable 64-bit seed derived from string parts; independent of std hasher
/// randomization so seeded runs replay identically everywhere.
pub fn stable_seed(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325; // FNV-1a
    for part in parts {
        for b in part.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff; // part separator
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn default_cold_start_ms() -> u64 {
    5000
}

/// Latency and fault model for one simulated accelerator type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub accel_type: String,
    /// Default cold-start for runtimes that do not override it per type.
    #[serde(default = "default_cold_start_ms")]
    pub cold_start_ms: u64,
    pub exec_median_ms: u64,
    /// Log-normal spread (sigma). Zero degenerates to the exact median.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
    /// Probability an execution fails. Default zero.
    #[serde(default)]
    pub fault_rate: f64,
}

impl BackendProfile {
    pub fn new(accel_type: impl Into<String>, exec_median_ms: u64) -> Self {
        BackendProfile {
            accel_type: accel_type.into(),
            cold_start_ms: default_cold_start_ms(),
            exec_median_ms,
            jitter: 0.0,
            seed: 0,
            fault_rate: 0.0,
        }
    }
}

/// One sampled execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecSample {
    pub exec_ms: u64,
    pub fault: bool,
}

/// Seeded sampler for simulated execution latencies.
///
/// Latency = median * exp(sigma * z) with z standard normal, so the
/// distribution median equals the configured median exactly and samples are
/// strictly positive.
#[derive(Debug, Clone)]
pub struct ExecSampler {
    median_ms: u64,
    sigma: f64,
    fault_rate: f64,
    rng: ChaCha8Rng,
}

impl ExecSampler {
    pub fn new(profile: &BackendProfile, seed: u64) -> Self {
        ExecSampler {
            median_ms: profile.exec_median_ms,
            sigma: profile.jitter,
            fault_rate: profile.fault_rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self) -> ExecSample {
        let exec_ms = if self.sigma == 0.0 {
            self.median_ms
        } else {
            let z: f64 = self.rng.sample(StandardNormal);
            let v = self.median_ms as f64 * (self.sigma * z).exp();
            (v.round() as u64).max(1)
        };
        let fault = self.fault_rate > 0.0 && self.rng.gen::<f64>() < self.fault_rate;
        ExecSample { exec_ms, fault }
    }
}

#[derive(Debug, Error)]
pub enum StartError {
    #[error("runtime {runtime} does not support accelerator type {accel_type}")]
    UnsupportedAccelerator { runtime: String, accel_type: String },
    #[error(transparent)]
    Slot(#[from] SlotError),
    #[error("failed to spawn runtime process: {0}")]
    SpawnFailure(String),
}

#[derive(Debug, Error)]
pub enum InvokeError {
    #[error("config key mismatch: instance holds {expected}, invocation has {got}")]
    ConfigMismatch { expected: String, got: String },
    #[error("instance is {0:?}, not Idle")]
    NotIdle(InstanceStatus),
    #[error("execution failed: {0}")]
    ExecutionFailure(String),
    #[error("dataset not found: {0}")]
    DatasetNotFound(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StopError {
    #[error("instance is busy; stop after the current invocation finishes")]
    BusyInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceStatus {
    Starting,
    Idle,
    Busy,
    Stopped,
}

/// A managed runtime instance bound to one accelerator slot.
#[derive(Debug)]
pub struct RuntimeInstance {
    pub instance_id: String,
    pub runtime_ref: String,
    /// Configuration key this instance serves; warm reuse matches on it.
    pub key: String,
    pub accel_type: String,
    pub accel_local_id: String,
    pub started_at: TimeMs,
    pub cold_start_ms: u64,
    status: InstanceStatus,
    /// Invocation claimed at cold-start time, executed once the instance
    /// becomes ready.
    pending: Option<Invocation>,
    current: Option<InvocationId>,
    idle_since: TimeMs,
    sampler: Option<ExecSampler>,
}

impl RuntimeInstance {
    /// Start an instance of `spec` on a slot of `accel`. The slot is held
    /// from now until `stop`. The instance is `Starting` and becomes `Idle`
    /// after `cold_start_ms` (the driver decides when that moment arrives).
    pub fn start(
        instance_id: impl Into<String>,
        spec: &RuntimeSpec,
        key: impl Into<String>,
        accel: &mut AcceleratorDescriptor,
        t: TimeMs,
        sampler: Option<ExecSampler>,
    ) -> Result<Self, StartError> {
        if !spec.supports(&accel.accel_type) {
            return Err(StartError::UnsupportedAccelerator {
                runtime: spec.id.clone(),
                accel_type: accel.accel_type.clone(),
            });
        }
        accel.acquire()?;
        let cold_start_ms = spec
            .cold_start_on(&accel.accel_type)
            .expect("validated spec has cold start for every supported type");
        Ok(RuntimeInstance {
            instance_id: instance_id.into(),
            runtime_ref: spec.id.clone(),
            key: key.into(),
            accel_type: accel.accel_type.clone(),
            accel_local_id: accel.local_id.clone(),
            started_at: t,
            cold_start_ms,
            status: InstanceStatus::Starting,
            pending: None,
            current: None,
            idle_since: t,
            sampler,
        })
    }

    pub fn status(&self) -> InstanceStatus {
        self.status
    }

    pub fn is_idle(&self) -> bool {
        self.status == InstanceStatus::Idle
    }

    /// When a cold-started instance becomes ready.
    pub fn ready_at(&self) -> TimeMs {
        self.started_at + self.cold_start_ms
    }

    /// Invocation id currently executing, if any.
    pub fn current_invocation(&self) -> Option<&InvocationId> {
        self.current.as_ref()
    }

    /// Bind the invocation that triggered this cold start.
    pub fn bind_pending(&mut self, inv: Invocation) {
        debug_assert_eq!(self.status, InstanceStatus::Starting);
        debug_assert!(self.pending.is_none());
        self.pending = Some(inv);
    }

    /// Starting -> Idle once the backend signals readiness. Returns the
    /// invocation bound at cold start, which should be dispatched now.
    pub fn mark_ready(&mut self, t: TimeMs) -> Option<Invocation> {
        debug_assert_eq!(self.status, InstanceStatus::Starting);
        self.status = InstanceStatus::Idle;
        self.idle_since = t;
        self.pending.take()
    }

    /// How long the instance has been idle at time `t`.
    pub fn idle_for(&self, t: TimeMs) -> Option<u64> {
        (self.status == InstanceStatus::Idle).then(|| t.saturating_sub(self.idle_since))
    }

    /// Idle -> Busy for `inv`. For the simulated backend the sampled
    /// execution duration and fault flag come back in the plan; drivers
    /// realize the plan as virtual-time events or an actual child-process
    /// round trip.
    pub fn begin_execution(&mut self, inv: &Invocation, _t: TimeMs) -> Result<ExecSample, InvokeError> {
        if self.status != InstanceStatus::Idle {
            return Err(InvokeError::NotIdle(self.status));
        }
        let got = inv.config_key();
        if got != self.key {
            return Err(InvokeError::ConfigMismatch {
                expected: self.key.clone(),
                got,
            });
        }
        let sample = match &mut self.sampler {
            Some(s) => s.sample(),
            // Process backend: duration is realized by the child, not sampled.
            None => ExecSample { exec_ms: 0, fault: false },
        };
        self.status = InstanceStatus::Busy;
        self.current = Some(inv.id.clone());
        Ok(sample)
    }

    /// Busy -> Idle once the result is in.
    pub fn finish_execution(&mut self, t: TimeMs) -> InvocationId {
        debug_assert_eq!(self.status, InstanceStatus::Busy);
        self.status = InstanceStatus::Idle;
        self.idle_since = t;
        self.current.take().expect("busy instance has an invocation")
    }

    /// Stop an Idle or Starting instance. The caller releases the slot.
    pub fn stop(&mut self, _t: TimeMs) -> Result<(), StopError> {
        match self.status {
            InstanceStatus::Busy => Err(StopError::BusyInstance),
            _ => {
                self.status = InstanceStatus::Stopped;
                self.pending = None;
                Ok(())
            }
        }
    }

    /// Tear down from any state (backend died). Returns whatever work was
    /// bound to the instance so the caller can resolve it as failed.
    pub fn abort(&mut self) -> (Option<Invocation>, Option<InvocationId>) {
        self.status = InstanceStatus::Stopped;
        (self.pending.take(), self.current.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invocation::{config_key, RunConfig};
    use std::collections::{BTreeMap, BTreeSet};

    fn spec(cold_ms: u64) -> RuntimeSpec {
        RuntimeSpec {
            id: "rt-vision".into(),
            artifact_ref: "rt/vision".into(),
            supported_accelerator_types: BTreeSet::from(["sim-gpu".to_string()]),
            cold_start_ms: BTreeMap::from([("sim-gpu".to_string(), cold_ms)]),
        }
    }

    fn invocation(id: &str) -> Invocation {
        Invocation {
            id: InvocationId::new(id),
            runtime_ref: "rt-vision".into(),
            dataset_ref: "ds/x".into(),
            run_config: RunConfig::new(),
            reply_to: "client".into(),
            ledger: Default::default(),
        }
    }

    fn key() -> String {
        config_key("rt-vision", &RunConfig::new())
    }

    #[test]
    fn cold_start_ready_after_configured_duration() {
        let mut accel = AcceleratorDescriptor::new("gpu0", "sim-gpu", 1);
        let inst = RuntimeInstance::start("i0", &spec(5000), key(), &mut accel, 0, None).unwrap();
        assert_eq!(inst.status(), InstanceStatus::Starting);
        assert_eq!(inst.ready_at(), 5000);
        assert_eq!(accel.in_use, 1);
    }

    #[test]
    fn unsupported_accelerator_rejected() {
        let mut accel = AcceleratorDescriptor::new("vpu0", "sim-vpu", 1);
        let err = RuntimeInstance::start("i0", &spec(5000), key(), &mut accel, 0, None).unwrap_err();
        assert!(matches!(err, StartError::UnsupportedAccelerator { .. }));
        assert_eq!(accel.in_use, 0); // no slot leaked
    }

    #[test]
    fn second_start_on_full_accelerator_fails() {
        let mut accel = AcceleratorDescriptor::new("gpu0", "sim-gpu", 1);
        let _first = RuntimeInstance::start("i0", &spec(5000), key(), &mut accel, 0, None).unwrap();
        let err = RuntimeInstance::start("i1", &spec(5000), key(), &mut accel, 0, None).unwrap_err();
        assert!(matches!(err, StartError::Slot(SlotError::SlotOccupied { .. })));
    }

    #[test]
    fn config_mismatch_leaves_instance_idle() {
        let mut accel = AcceleratorDescriptor::new("gpu0", "sim-gpu", 1);
        let mut inst = RuntimeInstance::start("i0", &spec(0), key(), &mut accel, 0, None).unwrap();
        inst.mark_ready(0);
        let mut other = invocation("e1");
        other.run_config.insert("batch".into(), "8".into());
        let err = inst.begin_execution(&other, 1).unwrap_err();
        assert!(matches!(err, InvokeError::ConfigMismatch { .. }));
        assert_eq!(inst.status(), InstanceStatus::Idle);
    }

    #[test]
    fn stop_while_busy_rejected_then_allowed() {
        let mut accel = AcceleratorDescriptor::new("gpu0", "sim-gpu", 1);
        let mut inst = RuntimeInstance::start("i0", &spec(0), key(), &mut accel, 0, None).unwrap();
        inst.mark_ready(0);
        inst.begin_execution(&invocation("e1"), 1).unwrap();
        assert_eq!(inst.stop(2), Err(StopError::BusyInstance));
        inst.finish_execution(3);
        assert_eq!(inst.stop(4), Ok(()));
        accel.release();
        assert_eq!(accel.in_use, 0);
    }

    #[test]
    fn slot_can_be_reacquired_after_stop() {
        let mut accel = AcceleratorDescriptor::new("gpu0", "sim-gpu", 1);
        let mut first = RuntimeInstance::start("i0", &spec(0), key(), &mut accel, 0, None).unwrap();
        first.stop(1).unwrap();
        accel.release();
        let again = RuntimeInstance::start("i1", &spec(0), key(), &mut accel, 2, None);
        assert!(again.is_ok());
    }

    // Zero jitter reproduces the configured medians exactly; these are the
    // calibration targets for the two simulated accelerator classes.
    #[test]
    fn zero_jitter_is_exact() {
        for median in [1675u64, 1577] {
            let profile = BackendProfile::new("sim-gpu", median);
            let mut s = ExecSampler::new(&profile, 7);
            for _ in 0..100 {
                assert_eq!(s.sample(), ExecSample { exec_ms: median, fault: false });
            }
        }
    }

    #[test]
    fn sampler_median_calibrated_within_two_percent() {
        let mut profile = BackendProfile::new("sim-gpu", 1675);
        profile.jitter = 0.3;
        let mut s = ExecSampler::new(&profile, 99);
        let mut xs: Vec<u64> = (0..10_000).map(|_| s.sample().exec_ms).collect();
        xs.sort_unstable();
        let median = xs[(xs.len() - 1) / 2] as f64;
        let err = (median - 1675.0).abs() / 1675.0;
        assert!(err < 0.02, "empirical median {median} off by {err:.4}");
        assert!(xs.iter().all(|&x| x > 0));
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let mut profile = BackendProfile::new("sim-gpu", 1675);
        profile.jitter = 0.25;
        profile.fault_rate = 0.1;
        let mut a = ExecSampler::new(&profile, 123);
        let mut b = ExecSampler::new(&profile, 123);
        let sa: Vec<ExecSample> = (0..500).map(|_| a.sample()).collect();
        let sb: Vec<ExecSample> = (0..500).map(|_| b.sample()).collect();
        assert_eq!(sa, sb);
        let mut c = ExecSampler::new(&profile, 124);
        let sc: Vec<ExecSample> = (0..500).map(|_| c.sample()).collect();
        assert_ne!(sa, sc);
    }

    #[test]
    fn fault_rate_injects_failures() {
        let mut profile = BackendProfile::new("sim-gpu", 100);
        profile.fault_rate = 0.2;
        let mut s = ExecSampler::new(&profile, 5);
        let faults = (0..2000).filter(|_| s.sample().fault).count();
        assert!((300..500).contains(&faults), "got {faults} faults");
    }

    #[test]
    fn stable_seed_is_stable_and_sensitive() {
        let a = stable_seed(&["run", "node-0", "i0"]);
        assert_eq!(a, stable_seed(&["run", "node-0", "i0"]));
        assert_ne!(a, stable_seed(&["run", "node-0", "i1"]));
        // Part boundaries matter: ["ab","c"] != ["a","bc"].
        assert_ne!(stable_seed(&["ab", "c"]), stable_seed(&["a", "bc"]));
    }
}
