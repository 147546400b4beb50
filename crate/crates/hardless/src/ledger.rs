//! Per-invocation lifecycle timestamps.
//!
//! Six stamps cover an invocation's life: client publish (`r_start`), node
//! claim (`n_start`), execution start/end inside the runtime (`e_start`,
//! `e_end`), node result receipt (`n_end`), client result receipt (`r_end`).
//! Fields are write-once and must respect the chain
//! `r_start <= n_start <= e_start <= e_end <= n_end <= r_end`.

use crate::clock::TimeMs;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Names of the six ledger fields, in chain order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerField {
    RStart,
    NStart,
    EStart,
    EEnd,
    NEnd,
    REnd,
}

impl LedgerField {
    /// All fields in chain order.
    pub const ALL: [LedgerField; 6] = [
        LedgerField::RStart,
        LedgerField::NStart,
        LedgerField::EStart,
        LedgerField::EEnd,
        LedgerField::NEnd,
        LedgerField::REnd,
    ];

    fn index(self) -> usize {
        Self::ALL.iter().position(|f| *f == self).unwrap()
    }
}

impl std::fmt::Display for LedgerField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LedgerField::RStart => "r_start",
            LedgerField::NStart => "n_start",
            LedgerField::EStart => "e_start",
            LedgerField::EEnd => "e_end",
            LedgerField::NEnd => "n_end",
            LedgerField::REnd => "r_end",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("field {0} is already stamped")]
    AlreadyStamped(LedgerField),
    #[error("stamping {field}={t} violates ordering against {neighbor}={neighbor_t}")]
    OrderViolation {
        field: LedgerField,
        t: TimeMs,
        neighbor: LedgerField,
        neighbor_t: TimeMs,
    },
}

/// Write-once timestamp ledger carried inside every invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestampLedger {
    pub r_start: Option<TimeMs>,
    pub n_start: Option<TimeMs>,
    pub e_start: Option<TimeMs>,
    pub e_end: Option<TimeMs>,
    pub n_end: Option<TimeMs>,
    pub r_end: Option<TimeMs>,
}

impl TimestampLedger {
    pub fn get(&self, field: LedgerField) -> Option<TimeMs> {
        match field {
            LedgerField::RStart => self.r_start,
            LedgerField::NStart => self.n_start,
            LedgerField::EStart => self.e_start,
            LedgerField::EEnd => self.e_end,
            LedgerField::NEnd => self.n_end,
            LedgerField::REnd => self.r_end,
        }
    }

    fn slot(&mut self, field: LedgerField) -> &mut Option<TimeMs> {
        match field {
            LedgerField::RStart => &mut self.r_start,
            LedgerField::NStart => &mut self.n_start,
            LedgerField::EStart => &mut self.e_start,
            LedgerField::EEnd => &mut self.e_end,
            LedgerField::NEnd => &mut self.n_end,
            LedgerField::REnd => &mut self.r_end,
        }
    }

    /// Set `field` to `t`. Fails if `field` is already set or if `t` breaks
    /// the chain against any already-set field on either side.
    pub fn stamp(&mut self, field: LedgerField, t: TimeMs) -> Result<(), LedgerError> {
        if self.get(field).is_some() {
            return Err(LedgerError::AlreadyStamped(field));
        }
        let idx = field.index();
        for (i, other) in LedgerField::ALL.iter().enumerate() {
            if let Some(ot) = self.get(*other) {
                if i < idx && ot > t || i > idx && ot < t {
                    return Err(LedgerError::OrderViolation {
                        field,
                        t,
                        neighbor: *other,
                        neighbor_t: ot,
                    });
                }
            }
        }
        *self.slot(field) = Some(t);
        Ok(())
    }

    /// Builder-style stamp for tests and literals.
    pub fn with(mut self, field: LedgerField, t: TimeMs) -> Self {
        self.stamp(field, t).expect("ledger literal out of order");
        self
    }

    /// True when every set field respects the chain order.
    pub fn is_monotone(&self) -> bool {
        let mut last: Option<TimeMs> = None;
        for f in LedgerField::ALL {
            if let Some(t) = self.get(f) {
                if let Some(prev) = last {
                    if t < prev {
                        return false;
                    }
                }
                last = Some(t);
            }
        }
        true
    }

    /// True when all six fields are set.
    pub fn is_complete(&self) -> bool {
        LedgerField::ALL.iter().all(|f| self.get(*f).is_some())
    }

    /// Merge timestamps observed elsewhere (e.g. a completion notice carrying
    /// node-side stamps) into this ledger. Existing values win; incoming
    /// values that would break the chain are ignored rather than trusted.
    pub fn absorb(&mut self, other: &TimestampLedger) {
        for f in LedgerField::ALL {
            if self.get(f).is_none() {
                if let Some(t) = other.get(f) {
                    let _ = self.stamp(f, t);
                }
            }
        }
    }
}
