//! Invocation, runtime, and accelerator domain types.

use crate::clock::TimeMs;
use crate::ledger::TimestampLedger;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Run-unique invocation identifier, assigned by the benchmark client.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InvocationId(pub String);

impl InvocationId {
    pub fn new(s: impl Into<String>) -> Self {
        InvocationId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for InvocationId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Opaque per-invocation run configuration. A sorted map so the canonical
/// serialization is insertion-order independent by construction.
pub type RunConfig = BTreeMap<String, String>;

/// Canonical serialization of a run configuration: sorted
/// `key=value&key=value` pairs, percent-encoded so distinct maps can never
/// collide. The empty map serializes to the empty string.
pub fn canonical_config(config: &RunConfig) -> String {
    let mut ser = form_urlencoded::Serializer::new(String::new());
    for (k, v) in config {
        ser.append_pair(k, v);
    }
    ser.finish()
}

/// The warm-matching key: runtime identity plus canonical configuration.
/// Two invocations can share a runtime instance iff their keys are equal,
/// so the key must cover both which runtime runs and how it is configured.
pub fn config_key(runtime_ref: &str, config: &RunConfig) -> String {
    format!("{}?{}", runtime_ref, canonical_config(config))
}

/// A single asynchronous user event: which runtime to run, on what data,
/// with what configuration, and where to signal completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub id: InvocationId,
    pub runtime_ref: String,
    pub dataset_ref: String,
    #[serde(default)]
    pub run_config: RunConfig,
    /// Completion-channel address; workers signal here, never via the queue.
    pub reply_to: String,
    #[serde(default)]
    pub ledger: TimestampLedger,
}

impl Invocation {
    /// Warm-matching key for this invocation.
    pub fn config_key(&self) -> String {
        config_key(&self.runtime_ref, &self.run_config)
    }

    /// Basic well-formedness: non-empty references.
    pub fn validate(&self) -> Result<(), InvalidInvocation> {
        if self.id.as_str().is_empty() {
            return Err(InvalidInvocation::EmptyField("id"));
        }
        if self.runtime_ref.is_empty() {
            return Err(InvalidInvocation::EmptyField("runtime_ref"));
        }
        if self.dataset_ref.is_empty() {
            return Err(InvalidInvocation::EmptyField("dataset_ref"));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvalidInvocation {
    #[error("invocation field {0} must be non-empty")]
    EmptyField(&'static str),
}

/// A provider-curated runtime: the executable artifact, which accelerator
/// types can host it, and its cold-start model per type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSpec {
    pub id: String,
    /// Object-store key of the runtime implementation.
    pub artifact_ref: String,
    pub supported_accelerator_types: BTreeSet<String>,
    /// Startup duration per accelerator type, milliseconds. Entries missing
    /// at load time are filled from the accelerator profile default.
    #[serde(default)]
    pub cold_start_ms: BTreeMap<String, u64>,
}

impl RuntimeSpec {
    pub fn supports(&self, accel_type: &str) -> bool {
        self.supported_accelerator_types.contains(accel_type)
    }

    /// Cold-start duration on `accel_type`; defined for every supported type
    /// once the spec has been resolved against profiles.
    pub fn cold_start_on(&self, accel_type: &str) -> Option<u64> {
        self.cold_start_ms.get(accel_type).copied()
    }

    pub fn validate(&self) -> Result<(), InvalidRuntimeSpec> {
        if self.supported_accelerator_types.is_empty() {
            return Err(InvalidRuntimeSpec::NoSupportedTypes(self.id.clone()));
        }
        for t in &self.supported_accelerator_types {
            if !self.cold_start_ms.contains_key(t) {
                return Err(InvalidRuntimeSpec::MissingColdStart {
                    runtime: self.id.clone(),
                    accel_type: t.clone(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvalidRuntimeSpec {
    #[error("runtime {0}: supported_accelerator_types must be non-empty")]
    NoSupportedTypes(String),
    #[error("runtime {runtime}: no cold_start_ms entry for supported type {accel_type}")]
    MissingColdStart { runtime: String, accel_type: String },
}

/// One physical or simulated accelerator attached to a node: its type, a
/// node-locally unique id, and slot occupancy used for load balancing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceleratorDescriptor {
    pub local_id: String,
    pub accel_type: String,
    /// Maximum concurrent runtime instances.
    pub capacity: u32,
    /// Currently occupied slots (counts Starting, Idle, and Busy instances).
    #[serde(default)]
    pub in_use: u32,
}

impl AcceleratorDescriptor {
    pub fn new(local_id: impl Into<String>, accel_type: impl Into<String>, capacity: u32) -> Self {
        AcceleratorDescriptor {
            local_id: local_id.into(),
            accel_type: accel_type.into(),
            capacity,
            in_use: 0,
        }
    }

    pub fn free_slots(&self) -> u32 {
        self.capacity - self.in_use
    }

    /// Take one slot. A slot is held from instance start until stop.
    pub fn acquire(&mut self) -> Result<(), SlotError> {
        if self.in_use >= self.capacity {
            return Err(SlotError::SlotOccupied {
                local_id: self.local_id.clone(),
                capacity: self.capacity,
            });
        }
        self.in_use += 1;
        Ok(())
    }

    /// Release one slot.
    pub fn release(&mut self) {
        assert!(self.in_use > 0, "release on accelerator with no slots in use");
        self.in_use -= 1;
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SlotError {
    #[error("accelerator {local_id} has all {capacity} slots occupied")]
    SlotOccupied { local_id: String, capacity: u32 },
}

/// A timestamp paired with the invocation it belongs to; used in queue scans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanItem {
    pub id: InvocationId,
    pub runtime_ref: String,
    pub config_key: String,
    pub enqueued_at: TimeMs,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(pairs: &[(&str, &str)]) -> RunConfig {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_config_serializes_to_empty_string() {
        assert_eq!(canonical_config(&RunConfig::new()), "");
        assert_eq!(config_key("rt", &RunConfig::new()), "rt?");
    }

    #[test]
    fn key_is_insertion_order_independent() {
        // BTreeMap sorts, but build from both insertion orders to make the
        // contract explicit.
        let mut a = RunConfig::new();
        a.insert("model".into(), "yolo".into());
        a.insert("batch".into(), "1".into());
        let mut b = RunConfig::new();
        b.insert("batch".into(), "1".into());
        b.insert("model".into(), "yolo".into());
        assert_eq!(config_key("rt", &a), config_key("rt", &b));
    }

    // Hand-enumerated canonical serializations: pairs sorted by key,
    // joined with '&', '=' between key and value.
    #[test]
    fn canonical_serialization_matches_hand_enumeration() {
        assert_eq!(canonical_config(&cfg(&[("model", "yolo")])), "model=yolo");
        assert_eq!(
            canonical_config(&cfg(&[("model", "yolo"), ("batch", "1")])),
            "batch=1&model=yolo"
        );
        assert_eq!(canonical_config(&cfg(&[("model", "yolo2")])), "model=yolo2");
        assert_ne!(
            config_key("rt", &cfg(&[("model", "yolo")])),
            config_key("rt", &cfg(&[("model", "yolo2")]))
        );
    }

    #[test]
    fn structural_characters_cannot_collide() {
        // {"a": "b=c"} vs {"a=b": "c"} and friends must stay distinct.
        let x = canonical_config(&cfg(&[("a", "b=c")]));
        let y = canonical_config(&cfg(&[("a=b", "c")]));
        assert_ne!(x, y);
        let p = canonical_config(&cfg(&[("a", "b"), ("c", "d")]));
        let q = canonical_config(&cfg(&[("a", "b&c=d")]));
        assert_ne!(p, q);
    }

    #[test]
    fn key_distinguishes_runtimes() {
        let c = cfg(&[("model", "yolo")]);
        assert_ne!(config_key("rt-a", &c), config_key("rt-b", &c));
    }

    #[test]
    fn runtime_spec_validation() {
        let mut spec = RuntimeSpec {
            id: "rt".into(),
            artifact_ref: "rt/bin".into(),
            supported_accelerator_types: BTreeSet::new(),
            cold_start_ms: BTreeMap::new(),
        };
        assert_eq!(spec.validate(), Err(InvalidRuntimeSpec::NoSupportedTypes("rt".into())));
        spec.supported_accelerator_types.insert("sim-gpu".into());
        assert!(matches!(spec.validate(), Err(InvalidRuntimeSpec::MissingColdStart { .. })));
        spec.cold_start_ms.insert("sim-gpu".into(), 5000);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn accelerator_slots() {
        let mut acc = AcceleratorDescriptor::new("gpu0", "sim-gpu", 2);
        acc.acquire().unwrap();
        acc.acquire().unwrap();
        assert_eq!(acc.free_slots(), 0);
        assert!(matches!(acc.acquire(), Err(SlotError::SlotOccupied { .. })));
        acc.release();
        assert_eq!(acc.free_slots(), 1);
        acc.acquire().unwrap();
    }

    proptest! {
        // config_key is a pure function: equal maps agree, and the canonical
        // form round-trips the exact pair set (injectivity).
        #[test]
        fn key_is_deterministic_and_injective(
            a in proptest::collection::btree_map("[a-z=&%?]{0,8}", "[a-z=&%?]{0,8}", 0..6),
            b in proptest::collection::btree_map("[a-z=&%?]{0,8}", "[a-z=&%?]{0,8}", 0..6),
        ) {
            prop_assert_eq!(canonical_config(&a), canonical_config(&a));
            if a != b {
                prop_assert_ne!(canonical_config(&a), canonical_config(&b));
            } else {
                prop_assert_eq!(canonical_config(&a), canonical_config(&b));
            }
        }
    }
}
