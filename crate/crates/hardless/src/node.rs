//! Node manager: owns a machine's accelerator list, claims eligible work
//! from the shared queue, manages runtime-instance lifecycle, and signals
//! completion straight back to the client.
//!
//! The manager is deliberately driver-agnostic. Handlers mutate node state
//! and return [`Directive`]s describing what must happen next; the virtual
//! -time engine realizes directives as scheduled events, the real-time
//! driver as worker threads. Scheduling policy therefore lives in exactly
//! one place:
//!
//! 1. warm reuse first: idle instances try `claim_same_config` on their key
//! 2. then cold starts: `claim_matching` over runtimes startable right now,
//!    placed on the least-loaded supporting accelerator (ties: lowest
//!    local_id)
//! 3. idle instances past `idle_timeout_ms` are evicted
//!
//! A node never claims more than it can immediately bind to an instance, so
//! backlog never piles up behind a single node.

use crate::clock::TimeMs;
use crate::invocation::{AcceleratorDescriptor, Invocation, InvocationId, RuntimeSpec};
use crate::ledger::{LedgerField, TimestampLedger};
use crate::queue::InvocationQueue;
use crate::runlog::{ClaimMode, RunEventKind, RunLog, StopReason};
use crate::runtime::{BackendProfile, ExecSampler, RuntimeInstance, StartError};
use crate::store::{ObjectStore, StoreError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{HashMap, HashSet};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex};
use thiserror::Error;

fn default_idle_timeout_ms() -> u64 {
    30_000
}

fn default_poll_interval_ms() -> u64 {
    50
}

/// Static node description; the on-disk JSON schema for node configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: String,
    pub accelerators: Vec<AcceleratorDescriptor>,
    /// Runtime ids installable on this node.
    pub runtimes: Vec<String>,
    #[serde(default = "default_idle_timeout_ms")]
    pub idle_timeout_ms: u64,
    #[serde(default = "default_poll_interval_ms")]
    pub poll_interval_ms: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvalidConfig {
    #[error("node {0}: accelerators must be non-empty")]
    NoAccelerators(String),
    #[error("node {node}: duplicate accelerator local_id {local_id}")]
    DuplicateAccelerator { node: String, local_id: String },
    #[error("node {node}: accelerator {local_id} has zero capacity")]
    ZeroCapacity { node: String, local_id: String },
    #[error("node {node}: runtime {runtime} is not defined")]
    UnknownRuntime { node: String, runtime: String },
    #[error("node {node}: runtime {runtime} is unsupported by every local accelerator type")]
    UnsupportedRuntime { node: String, runtime: String },
    #[error("node {node}: no backend profile for accelerator type {accel_type}")]
    MissingProfile { node: String, accel_type: String },
}

impl NodeConfig {
    /// Cross-check against the runtime catalog.
    pub fn validate(&self, specs: &HashMap<String, RuntimeSpec>) -> Result<(), InvalidConfig> {
        if self.accelerators.is_empty() {
            return Err(InvalidConfig::NoAccelerators(self.node_id.clone()));
        }
        let mut seen = HashSet::new();
        for acc in &self.accelerators {
            if !seen.insert(&acc.local_id) {
                return Err(InvalidConfig::DuplicateAccelerator {
                    node: self.node_id.clone(),
                    local_id: acc.local_id.clone(),
                });
            }
            if acc.capacity == 0 {
                return Err(InvalidConfig::ZeroCapacity {
                    node: self.node_id.clone(),
                    local_id: acc.local_id.clone(),
                });
            }
        }
        let local_types: HashSet<&str> =
            self.accelerators.iter().map(|a| a.accel_type.as_str()).collect();
        for rt in &self.runtimes {
            let spec = specs.get(rt).ok_or_else(|| InvalidConfig::UnknownRuntime {
                node: self.node_id.clone(),
                runtime: rt.clone(),
            })?;
            if !local_types.iter().any(|t| spec.supports(t)) {
                return Err(InvalidConfig::UnsupportedRuntime {
                    node: self.node_id.clone(),
                    runtime: rt.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Completion message sent to the client's reply channel. Workers never
/// touch the queue once an invocation is claimed; this is the only way
/// results travel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionNotice {
    pub invocation_id: InvocationId,
    pub status: NoticeStatus,
    pub result_ref: Option<String>,
    /// Node-side timestamps through n_end.
    pub ledger: TimestampLedger,
    pub node_id: String,
    pub accel_type: String,
    pub accel_local_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome", content = "reason")]
pub enum NoticeStatus {
    Success,
    Failure(String),
}

#[derive(Debug, Error)]
pub enum DeliveryError {
    #[error("reply channel {0} is closed or unknown")]
    ReplyChannelClosed(String),
}

/// Routes completion notices to reply-channel addresses. The queue is never
/// involved in the completion path.
#[derive(Default)]
pub struct CompletionRouter {
    channels: Mutex<HashMap<String, Sender<CompletionNotice>>>,
}

impl CompletionRouter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, addr: impl Into<String>, sender: Sender<CompletionNotice>) {
        self.channels.lock().unwrap().insert(addr.into(), sender);
    }

    pub fn deliver(&self, addr: &str, notice: CompletionNotice) -> Result<(), DeliveryError> {
        let channels = self.channels.lock().unwrap();
        let sender = channels
            .get(addr)
            .ok_or_else(|| DeliveryError::ReplyChannelClosed(addr.to_string()))?;
        sender
            .send(notice)
            .map_err(|_| DeliveryError::ReplyChannelClosed(addr.to_string()))
    }
}

/// Which executor realizes executions on this node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendMode {
    /// Seeded latency model; executions become virtual-time events.
    Simulated,
    /// External warm child processes (real-time mode).
    ExternalProcess,
}

/// What a driver must realize after a handler call.
#[derive(Debug)]
pub enum Directive {
    /// An instance is cold-starting; deliver `on_instance_ready` at
    /// `ready_at`.
    InstanceColdStarting { instance_id: String, ready_at: TimeMs },
    /// Simulated execution: e_start at `t + fetch_ms`, e_end `exec_ms`
    /// later; then call `on_execution_finished`.
    ExecutionPlanned {
        instance_id: String,
        invocation_id: InvocationId,
        fetch_ms: u64,
        exec_ms: u64,
        fault: bool,
    },
    /// Process-backed execution: the driver's worker fetches the dataset,
    /// drives the child process, and reports back.
    ExecutionRequested {
        instance_id: String,
        invocation: Invocation,
    },
    /// The instance went idle; worth an eviction sweep at `evict_at`.
    EvictionDue { instance_id: String, evict_at: TimeMs },
}

/// Result of one realized execution, reported back by the driver.
#[derive(Debug)]
pub enum ExecOutcome {
    /// Result bytes to persist under `results/<invocation id>`.
    Success(Vec<u8>),
    Failure(String),
}

/// Deterministic stand-in result for simulated executions.
pub fn simulated_result_bytes(inv: &Invocation) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(inv.id.as_str().as_bytes());
    h.update(inv.dataset_ref.as_bytes());
    h.finalize().to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Running,
    Draining,
    Stopped,
}

pub struct NodeManager {
    cfg: NodeConfig,
    status: NodeStatus,
    backend: BackendMode,
    queue: Arc<InvocationQueue>,
    store: Arc<ObjectStore>,
    router: Arc<CompletionRouter>,
    log: RunLog,
    specs: HashMap<String, RuntimeSpec>,
    profiles: HashMap<String, BackendProfile>,
    accelerators: Vec<AcceleratorDescriptor>,
    instances: HashMap<String, RuntimeInstance>,
    /// Stable creation order for deterministic warm-claim iteration.
    instance_order: Vec<String>,
    /// Invocation bound to a Busy instance.
    in_flight: HashMap<String, Invocation>,
    next_instance_serial: u64,
    run_seed: u64,
}

impl NodeManager {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: NodeConfig,
        backend: BackendMode,
        specs: HashMap<String, RuntimeSpec>,
        profiles: HashMap<String, BackendProfile>,
        queue: Arc<InvocationQueue>,
        store: Arc<ObjectStore>,
        router: Arc<CompletionRouter>,
        log: RunLog,
        run_seed: u64,
    ) -> Result<Self, InvalidConfig> {
        cfg.validate(&specs)?;
        if backend == BackendMode::Simulated {
            for acc in &cfg.accelerators {
                if !profiles.contains_key(&acc.accel_type) {
                    return Err(InvalidConfig::MissingProfile {
                        node: cfg.node_id.clone(),
                        accel_type: acc.accel_type.clone(),
                    });
                }
            }
        }
        let mut accelerators = cfg.accelerators.clone();
        for acc in &mut accelerators {
            acc.in_use = 0;
        }
        Ok(NodeManager {
            accelerators,
            cfg,
            status: NodeStatus::Running,
            backend,
            queue,
            store,
            router,
            log,
            specs,
            profiles,
            instances: HashMap::new(),
            instance_order: Vec::new(),
            in_flight: HashMap::new(),
            next_instance_serial: 0,
            run_seed,
        })
    }

    pub fn node_id(&self) -> &str {
        &self.cfg.node_id
    }

    pub fn status(&self) -> NodeStatus {
        self.status
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn instance(&self, instance_id: &str) -> Option<&RuntimeInstance> {
        self.instances.get(instance_id)
    }

    pub fn accelerators(&self) -> &[AcceleratorDescriptor] {
        &self.accelerators
    }

    pub fn free_slot_count(&self) -> u32 {
        self.accelerators.iter().map(|a| a.free_slots()).sum()
    }

    /// Announce the node. There is no broker registration: joining simply
    /// means starting to consume from the shared queue.
    pub fn join(&mut self, t: TimeMs) {
        self.log.record(t, RunEventKind::NodeJoined { node_id: self.cfg.node_id.clone() });
    }

    /// One scheduling pass: warm claims, then cold starts, then eviction.
    pub fn tick(&mut self, t: TimeMs) -> Vec<Directive> {
        let mut out = Vec::new();
        if self.status == NodeStatus::Running {
            self.warm_claims(t, &mut out);
            self.cold_claims(t, &mut out);
        }
        self.evict_expired(t);
        self.finish_drain_if_done(t);
        out
    }

    /// Warm-reuse pass: each idle instance asks the queue for work with its
    /// exact configuration key.
    fn warm_claims(&mut self, t: TimeMs, out: &mut Vec<Directive>) {
        let idle: Vec<String> = self
            .instance_order
            .iter()
            .filter(|id| self.instances.get(*id).is_some_and(|i| i.is_idle()))
            .cloned()
            .collect();
        for instance_id in idle {
            let key = self.instances[&instance_id].key.clone();
            if let Some(inv) = self.queue.claim_same_config(&key, t) {
                self.log.record(
                    t,
                    RunEventKind::Claimed {
                        id: inv.id.clone(),
                        node_id: self.cfg.node_id.clone(),
                        mode: ClaimMode::Warm,
                        config_key: key,
                    },
                );
                self.dispatch(&instance_id, inv, t, out);
            }
        }
    }

    /// Runtimes that could be cold-started right now: a free slot exists on
    /// some accelerator type that supports them.
    fn startable_runtimes(&self) -> HashSet<String> {
        let free_types: HashSet<&str> = self
            .accelerators
            .iter()
            .filter(|a| a.free_slots() > 0)
            .map(|a| a.accel_type.as_str())
            .collect();
        self.cfg
            .runtimes
            .iter()
            .filter(|rt| {
                self.specs
                    .get(*rt)
                    .is_some_and(|s| free_types.iter().any(|t| s.supports(t)))
            })
            .cloned()
            .collect()
    }

    fn cold_claims(&mut self, t: TimeMs, out: &mut Vec<Directive>) {
        loop {
            let startable = self.startable_runtimes();
            if startable.is_empty() {
                return;
            }
            let Some(inv) = self.queue.claim_matching(&startable, t) else {
                return;
            };
            let key = inv.config_key();
            self.log.record(
                t,
                RunEventKind::Claimed {
                    id: inv.id.clone(),
                    node_id: self.cfg.node_id.clone(),
                    mode: ClaimMode::Cold,
                    config_key: key.clone(),
                },
            );
            self.cold_start(inv, key, t, out);
        }
    }

    /// Start a fresh instance for `inv` on the least-loaded supporting
    /// accelerator (ties broken by lowest local_id).
    fn cold_start(&mut self, inv: Invocation, key: String, t: TimeMs, out: &mut Vec<Directive>) {
        let spec = self.specs[&inv.runtime_ref].clone();
        let accel_idx = self
            .accelerators
            .iter()
            .enumerate()
            .filter(|(_, a)| a.free_slots() > 0 && spec.supports(&a.accel_type))
            .min_by(|(_, a), (_, b)| {
                a.in_use.cmp(&b.in_use).then_with(|| a.local_id.cmp(&b.local_id))
            })
            .map(|(i, _)| i)
            .expect("startable_runtimes guaranteed a free supporting slot");

        let instance_id = format!("{}/i{}", self.cfg.node_id, self.next_instance_serial);
        self.next_instance_serial += 1;
        let accel = &mut self.accelerators[accel_idx];
        let sampler = match self.backend {
            BackendMode::Simulated => {
                let profile = &self.profiles[&accel.accel_type];
                let seed = crate::runtime::stable_seed(&[
                    &self.run_seed.to_string(),
                    &profile.seed.to_string(),
                    &self.cfg.node_id,
                    &instance_id,
                ]);
                Some(ExecSampler::new(profile, seed))
            }
            BackendMode::ExternalProcess => None,
        };
        let mut instance =
            match RuntimeInstance::start(&instance_id, &spec, &key, accel, t, sampler) {
                Ok(i) => i,
                Err(e) => {
                    // Slot or support invariants were checked above; reaching
                    // here means the runtime process could not come up.
                    self.fail_invocation(inv, format!("cold start failed: {e}"), t);
                    return;
                }
            };
        instance.bind_pending(inv);
        self.log.record(
            t,
            RunEventKind::InstanceStarted {
                node_id: self.cfg.node_id.clone(),
                instance_id: instance_id.clone(),
                accel_type: instance.accel_type.clone(),
                accel_local_id: instance.accel_local_id.clone(),
                config_key: key,
                cold_start_ms: instance.cold_start_ms,
            },
        );
        out.push(Directive::InstanceColdStarting {
            instance_id: instance_id.clone(),
            ready_at: instance.ready_at(),
        });
        self.instance_order.push(instance_id.clone());
        self.instances.insert(instance_id, instance);
    }

    /// Cold start finished: the instance is warm. Dispatch the invocation
    /// that triggered it.
    pub fn on_instance_ready(&mut self, instance_id: &str, t: TimeMs) -> Vec<Directive> {
        let mut out = Vec::new();
        let Some(instance) = self.instances.get_mut(instance_id) else {
            return out;
        };
        let pending = instance.mark_ready(t);
        self.log.record(
            t,
            RunEventKind::InstanceIdle {
                node_id: self.cfg.node_id.clone(),
                instance_id: instance_id.to_string(),
            },
        );
        if let Some(inv) = pending {
            self.dispatch(instance_id, inv, t, &mut out);
        } else {
            self.after_idle(instance_id, t, &mut out);
        }
        out
    }

    /// Bind `inv` to an idle instance and plan its execution.
    fn dispatch(&mut self, instance_id: &str, inv: Invocation, t: TimeMs, out: &mut Vec<Directive>) {
        // The fetch model is consulted up front so delivery delay includes
        // data-set transfer; a missing dataset fails the invocation without
        // occupying the instance.
        let fetch_ms = match self.store.fetch_delay_ms(&inv.dataset_ref) {
            Ok(ms) => ms,
            Err(StoreError::NotFound(key)) => {
                self.log.record(
                    t,
                    RunEventKind::DispatchFailed {
                        node_id: self.cfg.node_id.clone(),
                        id: inv.id.clone(),
                        reason: format!("dataset not found: {key}"),
                    },
                );
                self.fail_invocation(inv, format!("dataset not found: {key}"), t);
                self.after_idle(instance_id, t, out);
                return;
            }
            Err(e) => {
                self.fail_invocation(inv, format!("store error: {e}"), t);
                self.after_idle(instance_id, t, out);
                return;
            }
        };
        let instance = self.instances.get_mut(instance_id).expect("dispatch target exists");
        let sample = instance
            .begin_execution(&inv, t)
            .expect("dispatch only targets idle instances with matching keys");
        self.log.record(
            t,
            RunEventKind::InstanceBusy {
                node_id: self.cfg.node_id.clone(),
                instance_id: instance_id.to_string(),
                id: inv.id.clone(),
            },
        );
        match self.backend {
            BackendMode::Simulated => out.push(Directive::ExecutionPlanned {
                instance_id: instance_id.to_string(),
                invocation_id: inv.id.clone(),
                fetch_ms,
                exec_ms: sample.exec_ms,
                fault: sample.fault,
            }),
            BackendMode::ExternalProcess => out.push(Directive::ExecutionRequested {
                instance_id: instance_id.to_string(),
                invocation: inv.clone(),
            }),
        }
        self.in_flight.insert(instance_id.to_string(), inv);
    }

    /// An execution finished (driver-reported). Stamps the node-side
    /// timestamps, persists the result, signals the client, and tries to
    /// reuse the now-warm instance.
    pub fn on_execution_finished(
        &mut self,
        instance_id: &str,
        e_start: TimeMs,
        e_end: TimeMs,
        outcome: ExecOutcome,
        t: TimeMs,
    ) -> Vec<Directive> {
        let mut out = Vec::new();
        let Some(instance) = self.instances.get_mut(instance_id) else {
            return out;
        };
        instance.finish_execution(t);
        let accel_type = instance.accel_type.clone();
        let accel_local_id = instance.accel_local_id.clone();
        let mut inv = self
            .in_flight
            .remove(instance_id)
            .expect("busy instance has an in-flight invocation");

        inv.ledger.stamp(LedgerField::EStart, e_start).expect("e_start follows n_start");
        inv.ledger.stamp(LedgerField::EEnd, e_end).expect("e_end follows e_start");

        let status = match outcome {
            ExecOutcome::Success(bytes) => {
                let result_ref = format!("results/{}", inv.id);
                match self.store.put(&result_ref, bytes) {
                    Ok(_) => NoticeStatus::Success,
                    Err(e) => NoticeStatus::Failure(format!("result persist failed: {e}")),
                }
            }
            ExecOutcome::Failure(reason) => NoticeStatus::Failure(reason),
        };
        inv.ledger.stamp(LedgerField::NEnd, t).expect("n_end follows e_end");

        self.log.record(
            t,
            RunEventKind::ExecutionFinished {
                node_id: self.cfg.node_id.clone(),
                instance_id: instance_id.to_string(),
                accel_type: accel_type.clone(),
                accel_local_id: accel_local_id.clone(),
                id: inv.id.clone(),
                e_start,
                e_end,
                ok: status == NoticeStatus::Success,
            },
        );
        self.log.record(
            t,
            RunEventKind::InstanceIdle {
                node_id: self.cfg.node_id.clone(),
                instance_id: instance_id.to_string(),
            },
        );

        let result_ref = match &status {
            NoticeStatus::Success => Some(format!("results/{}", inv.id)),
            NoticeStatus::Failure(_) => None,
        };
        self.send_notice(CompletionNotice {
            invocation_id: inv.id.clone(),
            status,
            result_ref,
            ledger: inv.ledger,
            node_id: self.cfg.node_id.clone(),
            accel_type,
            accel_local_id,
        }, &inv.reply_to, t);

        self.after_idle(instance_id, t, &mut out);
        self.finish_drain_if_done(t);
        out
    }

    /// An instance just went idle: try a warm claim, otherwise schedule its
    /// eviction (or stop it immediately when draining).
    fn after_idle(&mut self, instance_id: &str, t: TimeMs, out: &mut Vec<Directive>) {
        if self.status == NodeStatus::Running {
            let key = self.instances[instance_id].key.clone();
            if let Some(next) = self.queue.claim_same_config(&key, t) {
                self.log.record(
                    t,
                    RunEventKind::Claimed {
                        id: next.id.clone(),
                        node_id: self.cfg.node_id.clone(),
                        mode: ClaimMode::Warm,
                        config_key: key,
                    },
                );
                self.dispatch(instance_id, next, t, out);
                return;
            }
            out.push(Directive::EvictionDue {
                instance_id: instance_id.to_string(),
                evict_at: t + self.cfg.idle_timeout_ms,
            });
        } else {
            self.stop_instance(instance_id, t, StopReason::Shutdown);
        }
    }

    /// Resolve a claimed invocation that never reached an instance.
    fn fail_invocation(&mut self, mut inv: Invocation, reason: String, t: TimeMs) {
        let _ = inv.ledger.stamp(LedgerField::NEnd, t);
        self.send_notice(
            CompletionNotice {
                invocation_id: inv.id.clone(),
                status: NoticeStatus::Failure(reason),
                result_ref: None,
                ledger: inv.ledger,
                node_id: self.cfg.node_id.clone(),
                accel_type: String::new(),
                accel_local_id: String::new(),
            },
            &inv.reply_to,
            t,
        );
    }

    fn send_notice(&self, notice: CompletionNotice, reply_to: &str, t: TimeMs) {
        let id = notice.invocation_id.clone();
        let ok = self.router.deliver(reply_to, notice).is_ok();
        // A closed reply channel is logged, never fatal: the work is done.
        self.log.record(t, RunEventKind::NoticeDelivered { id, ok });
    }

    fn stop_instance(&mut self, instance_id: &str, t: TimeMs, reason: StopReason) {
        let Some(mut instance) = self.instances.remove(instance_id) else {
            return;
        };
        instance.stop(t).expect("only idle instances are stopped");
        let accel = self
            .accelerators
            .iter_mut()
            .find(|a| a.local_id == instance.accel_local_id)
            .expect("instance accelerator exists");
        accel.release();
        self.instance_order.retain(|id| id != instance_id);
        self.log.record(
            t,
            RunEventKind::InstanceStopped {
                node_id: self.cfg.node_id.clone(),
                instance_id: instance_id.to_string(),
                reason,
            },
        );
    }

    fn evict_expired(&mut self, t: TimeMs) {
        let expired: Vec<String> = self
            .instance_order
            .iter()
            .filter(|id| {
                self.instances
                    .get(*id)
                    .and_then(|i| i.idle_for(t))
                    .is_some_and(|idle| idle >= self.cfg.idle_timeout_ms)
            })
            .cloned()
            .collect();
        for id in expired {
            self.stop_instance(&id, t, StopReason::Evicted);
        }
    }

    /// A backend died (spawn failure or process exit). The slot is
    /// released and any bound work is resolved as failed rather than lost.
    pub fn on_instance_failed(&mut self, instance_id: &str, reason: &str, t: TimeMs) {
        let Some(mut instance) = self.instances.remove(instance_id) else {
            return;
        };
        let (pending, current) = instance.abort();
        let accel = self
            .accelerators
            .iter_mut()
            .find(|a| a.local_id == instance.accel_local_id)
            .expect("instance accelerator exists");
        accel.release();
        self.instance_order.retain(|id| id != instance_id);
        self.log.record(
            t,
            RunEventKind::InstanceStopped {
                node_id: self.cfg.node_id.clone(),
                instance_id: instance_id.to_string(),
                reason: StopReason::Failed,
            },
        );
        let inflight = current.and_then(|_| self.in_flight.remove(instance_id));
        for inv in pending.into_iter().chain(inflight) {
            self.fail_invocation(inv, reason.to_string(), t);
        }
        self.finish_drain_if_done(t);
    }

    /// Begin a clean shutdown: no new claims; busy and cold-starting
    /// instances run to completion, idle ones stop now.
    pub fn begin_drain(&mut self, t: TimeMs) {
        if self.status != NodeStatus::Running {
            return;
        }
        self.status = NodeStatus::Draining;
        self.log.record(t, RunEventKind::NodeDraining { node_id: self.cfg.node_id.clone() });
        let idle: Vec<String> = self
            .instance_order
            .iter()
            .filter(|id| self.instances.get(*id).is_some_and(|i| i.is_idle()))
            .cloned()
            .collect();
        for id in idle {
            self.stop_instance(&id, t, StopReason::Shutdown);
        }
        self.finish_drain_if_done(t);
    }

    fn finish_drain_if_done(&mut self, t: TimeMs) {
        if self.status == NodeStatus::Draining && self.instances.is_empty() {
            self.status = NodeStatus::Stopped;
            self.log.record(t, RunEventKind::NodeStopped { node_id: self.cfg.node_id.clone() });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invocation::{config_key, RunConfig};
    use crate::store::FetchLatencyModel;
    use std::collections::{BTreeMap, BTreeSet};
    use std::sync::mpsc;

    fn spec_for(types: &[&str]) -> RuntimeSpec {
        RuntimeSpec {
            id: "rt-vision".into(),
            artifact_ref: "rt/vision".into(),
            supported_accelerator_types: types.iter().map(|s| s.to_string()).collect(),
            cold_start_ms: types.iter().map(|s| (s.to_string(), 1000)).collect(),
        }
    }

    struct Harness {
        node: NodeManager,
        queue: Arc<InvocationQueue>,
        store: Arc<ObjectStore>,
        rx: mpsc::Receiver<CompletionNotice>,
        log: RunLog,
        n: u64,
        now: TimeMs,
    }

    impl Harness {
        fn new(accels: Vec<AcceleratorDescriptor>) -> Self {
            Self::with_spec(accels, spec_for(&["sim-gpu", "sim-vpu"]))
        }

        fn with_spec(accels: Vec<AcceleratorDescriptor>, spec: RuntimeSpec) -> Self {
            let queue = Arc::new(InvocationQueue::new());
            let store = Arc::new(ObjectStore::with_options(
                FetchLatencyModel { bandwidth_bytes_per_ms: 1, fixed_overhead_ms: 10 },
                None,
                None,
            ).unwrap());
            store.put("ds/x", vec![0u8; 0]).unwrap();
            let router = Arc::new(CompletionRouter::new());
            let (tx, rx) = mpsc::channel();
            router.register("client", tx);
            let log = RunLog::new();
            let cfg = NodeConfig {
                node_id: "n0".into(),
                accelerators: accels,
                runtimes: vec![spec.id.clone()],
                idle_timeout_ms: 30_000,
                poll_interval_ms: 50,
            };
            let profiles = HashMap::from([
                ("sim-gpu".to_string(), BackendProfile::new("sim-gpu", 1675)),
                ("sim-vpu".to_string(), BackendProfile::new("sim-vpu", 1577)),
            ]);
            let node = NodeManager::new(
                cfg,
                BackendMode::Simulated,
                HashMap::from([(spec.id.clone(), spec)]),
                profiles,
                Arc::clone(&queue),
                Arc::clone(&store),
                router,
                log.clone(),
                42,
            )
            .unwrap();
            Harness { node, queue, store, rx, log, n: 0, now: 0 }
        }

        fn publish(&mut self, cfg: &[(&str, &str)], t: TimeMs) -> InvocationId {
            self.now = self.now.max(t);
            self.n += 1;
            let id = InvocationId::new(format!("e{}", self.n));
            let mut inv = Invocation {
                id: id.clone(),
                runtime_ref: "rt-vision".into(),
                dataset_ref: "ds/x".into(),
                run_config: cfg.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
                reply_to: "client".into(),
                ledger: Default::default(),
            };
            inv.ledger.stamp(LedgerField::RStart, t).unwrap();
            self.queue.publish(inv, t).unwrap();
            id
        }

        /// Drive directives to completion, depth-first, entirely by hand,
        /// advancing a scalar notion of "now" the way a driver would.
        fn run_directives(&mut self, directives: Vec<Directive>) {
            for d in directives {
                match d {
                    Directive::InstanceColdStarting { instance_id, ready_at } => {
                        self.now = self.now.max(ready_at);
                        let next = self.node.on_instance_ready(&instance_id, self.now);
                        self.run_directives(next);
                    }
                    Directive::ExecutionPlanned { instance_id, fetch_ms, exec_ms, fault, invocation_id } => {
                        let e_start = self.now + fetch_ms;
                        let e_end = e_start + exec_ms;
                        self.now = e_end;
                        let outcome = if fault {
                            ExecOutcome::Failure("injected fault".into())
                        } else {
                            ExecOutcome::Success(format!("result-{invocation_id}").into_bytes())
                        };
                        let next = self.node.on_execution_finished(&instance_id, e_start, e_end, outcome, e_end);
                        self.run_directives(next);
                    }
                    Directive::ExecutionRequested { .. } | Directive::EvictionDue { .. } => {}
                }
            }
        }
    }

    fn gpu(local_id: &str, capacity: u32) -> AcceleratorDescriptor {
        AcceleratorDescriptor::new(local_id, "sim-gpu", capacity)
    }

    #[test]
    fn invalid_config_unsupported_runtime() {
        let queue = Arc::new(InvocationQueue::new());
        let store = Arc::new(ObjectStore::new());
        let router = Arc::new(CompletionRouter::new());
        let cfg = NodeConfig {
            node_id: "n0".into(),
            accelerators: vec![AcceleratorDescriptor::new("cpu0", "cpu-process", 1)],
            runtimes: vec!["rt-vision".into()],
            idle_timeout_ms: 1000,
            poll_interval_ms: 50,
        };
        let specs = HashMap::from([("rt-vision".to_string(), spec_for(&["sim-gpu"]))]);
        let err = NodeManager::new(
            cfg,
            BackendMode::Simulated,
            specs,
            HashMap::new(),
            queue,
            store,
            router,
            RunLog::new(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, InvalidConfig::UnsupportedRuntime { .. }));
    }

    #[test]
    fn cold_claim_starts_instance_and_executes() {
        let mut h = Harness::new(vec![gpu("gpu0", 1)]);
        h.publish(&[], 0);
        let ds = h.node.tick(0);
        assert_eq!(ds.len(), 1);
        assert!(matches!(&ds[0], Directive::InstanceColdStarting { ready_at: 1000, .. }));
        h.run_directives(ds);
        let notice = h.rx.try_recv().unwrap();
        assert_eq!(notice.status, NoticeStatus::Success);
        let result_ref = notice.result_ref.unwrap();
        assert!(h.store.contains(&result_ref));
        assert!(notice.ledger.is_monotone());
        assert!(notice.ledger.n_end.is_some());
    }

    #[test]
    fn saturated_node_never_claims() {
        let mut h = Harness::new(vec![gpu("gpu0", 1)]);
        h.publish(&[], 0);
        let ds = h.node.tick(0); // slot now held by a starting instance
        h.publish(&[], 1);
        let more = h.node.tick(1);
        assert!(more.is_empty(), "saturated tick must not claim");
        assert_eq!(h.queue.stats().pending_count, 1);
        drop(ds);
    }

    // Warm instance with key k1 idle; queue holds one k1 and one k2 entry.
    // The tick dispatches k1 to the warm instance; k1 is never cold-started.
    #[test]
    fn warm_first_over_cold_start() {
        let mut h = Harness::new(vec![gpu("gpu0", 2)]);
        let k1 = config_key("rt-vision", &RunConfig::from([("m".to_string(), "a".to_string())]));
        // Prime a warm instance for k1.
        h.publish(&[("m", "a")], 0);
        let ds = h.node.tick(0);
        h.run_directives(ds); // completes; instance idle with key k1
        let warm_id = h.node.instance_order[0].clone();
        assert!(h.node.instance(&warm_id).unwrap().is_idle());

        h.publish(&[("m", "a")], 100); // k1 entry
        h.publish(&[("m", "b")], 101); // k2 entry
        let ds = h.node.tick(200);
        // First directive: warm execution of the k1 entry on the existing
        // instance. Cold start, if any, is for k2 only.
        match &ds[0] {
            Directive::ExecutionPlanned { instance_id, .. } => assert_eq!(*instance_id, warm_id),
            other => panic!("expected warm dispatch first, got {other:?}"),
        }
        for d in &ds[1..] {
            if let Directive::InstanceColdStarting { instance_id, .. } = d {
                let inst = h.node.instance(instance_id).unwrap();
                assert_ne!(inst.key, k1, "cold start for a warm-covered key");
            }
        }
    }

    // Two supporting accelerators with in_use 1 and 0: the cold start lands
    // on the idle one; ties break toward the lowest local_id.
    #[test]
    fn least_loaded_placement() {
        let mut h = Harness::new(vec![gpu("gpu0", 2), gpu("gpu1", 2)]);
        h.publish(&[], 0);
        h.run_directives(h.node.tick(0)); // first lands on gpu0 (tie, lowest id)
        let first = &h.node.accelerators()[0];
        assert_eq!((first.local_id.as_str(), first.in_use), ("gpu0", 1));

        h.publish(&[("m", "other")], 10);
        let ds = h.node.tick(10);
        let Directive::InstanceColdStarting { instance_id, .. } = &ds[0] else {
            panic!("expected cold start");
        };
        assert_eq!(h.node.instance(instance_id).unwrap().accel_local_id, "gpu1");
    }

    #[test]
    fn eviction_after_idle_timeout() {
        let mut h = Harness::new(vec![gpu("gpu0", 1)]);
        h.publish(&[], 0);
        h.run_directives(h.node.tick(0));
        let iid = h.node.instance_order[0].clone();
        assert!(h.node.instance(&iid).unwrap().is_idle());
        // Idle since ~2000; not yet expired at +idle_timeout-1.
        let idle_since = 1010 + 1675; // fetch 10ms + exec
        h.node.tick(idle_since + 29_999);
        assert!(h.node.instance(&iid).is_some());
        h.node.tick(idle_since + 30_000);
        assert!(h.node.instance(&iid).is_none(), "instance evicted");
        assert_eq!(h.node.free_slot_count(), 1);
        let stopped = h
            .log
            .snapshot()
            .iter()
            .filter(|e| matches!(e.kind, RunEventKind::InstanceStopped { reason: StopReason::Evicted, .. }))
            .count();
        assert_eq!(stopped, 1);
    }

    #[test]
    fn missing_dataset_fails_invocation_without_losing_it() {
        let mut h = Harness::new(vec![gpu("gpu0", 1)]);
        h.n += 1;
        let mut inv = Invocation {
            id: InvocationId::new("edangle"),
            runtime_ref: "rt-vision".into(),
            dataset_ref: "ds/missing".into(),
            run_config: RunConfig::new(),
            reply_to: "client".into(),
            ledger: Default::default(),
        };
        inv.ledger.stamp(LedgerField::RStart, 0).unwrap();
        h.queue.publish(inv, 0).unwrap();
        h.run_directives(h.node.tick(0));
        let notice = h.rx.try_recv().unwrap();
        assert!(matches!(notice.status, NoticeStatus::Failure(_)));
        assert!(notice.result_ref.is_none());
    }

    #[test]
    fn drain_completes_inflight_then_stops() {
        let mut h = Harness::new(vec![gpu("gpu0", 1)]);
        h.publish(&[], 0);
        let ds = h.node.tick(0);
        h.node.begin_drain(1); // while cold-starting with bound work
        assert_eq!(h.node.status(), NodeStatus::Draining);
        h.run_directives(ds); // work completes, instance stops, node stops
        assert_eq!(h.node.status(), NodeStatus::Stopped);
        let notice = h.rx.try_recv().unwrap();
        assert_eq!(notice.status, NoticeStatus::Success);
        // Draining node never claims again.
        h.publish(&[], 5000);
        assert!(h.node.tick(5000).is_empty());
        assert_eq!(h.queue.stats().pending_count, 1);
    }

    #[test]
    fn warm_reuse_skips_cold_start_on_second_invocation() {
        let mut h = Harness::new(vec![gpu("gpu0", 1)]);
        h.publish(&[], 0);
        h.run_directives(h.node.tick(0));
        h.publish(&[], 3000);
        let ds = h.node.tick(3000);
        assert!(
            matches!(ds[0], Directive::ExecutionPlanned { .. }),
            "second same-config invocation reuses the warm instance"
        );
        // Exactly one InstanceStarted in the whole log.
        let starts = h
            .log
            .snapshot()
            .iter()
            .filter(|e| matches!(e.kind, RunEventKind::InstanceStarted { .. }))
            .count();
        assert_eq!(starts, 1);
    }

    #[test]
    fn backend_failure_releases_slot_and_fails_work() {
        let mut h = Harness::new(vec![gpu("gpu0", 1)]);
        h.publish(&[], 0);
        let ds = h.node.tick(0);
        let Directive::InstanceColdStarting { instance_id, .. } = &ds[0] else {
            panic!("expected cold start");
        };
        h.node.on_instance_failed(instance_id, "runtime exited before READY", 500);
        assert_eq!(h.node.free_slot_count(), 1);
        let notice = h.rx.try_recv().unwrap();
        assert!(matches!(notice.status, NoticeStatus::Failure(_)));
        // Slot is usable again.
        h.publish(&[], 600);
        assert!(matches!(h.node.tick(600)[0], Directive::InstanceColdStarting { .. }));
    }

    #[test]
    fn unknown_reply_channel_is_logged_not_fatal() {
        let mut h = Harness::new(vec![gpu("gpu0", 1)]);
        h.n += 1;
        let mut inv = Invocation {
            id: InvocationId::new("e-orphan"),
            runtime_ref: "rt-vision".into(),
            dataset_ref: "ds/x".into(),
            run_config: RunConfig::new(),
            reply_to: "nobody-home".into(),
            ledger: Default::default(),
        };
        inv.ledger.stamp(LedgerField::RStart, 0).unwrap();
        h.queue.publish(inv, 0).unwrap();
        h.run_directives(h.node.tick(0));
        let delivered_ok = h.log.snapshot().iter().any(
            |e| matches!(e.kind, RunEventKind::NoticeDelivered { ok: false, .. }),
        );
        assert!(delivered_ok, "failed delivery must be logged");
    }
}
