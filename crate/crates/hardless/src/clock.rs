//! Logical run clock shared by every component.
//!
//! All timestamps in the system are integer milliseconds on a single logical
//! clock per run. In virtual mode time advances only when the event loop says
//! so; in real-time mode logical time is derived from a process monotonic
//! clock, optionally compressed by a time-scale divisor so long protocols can
//! be replayed at desk scale.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

/// Milliseconds on the run's logical clock.
pub type TimeMs = u64;

#[derive(Clone)]
enum Inner {
    Virtual(Arc<AtomicU64>),
    Real { origin: Instant, scale: u64 },
}

/// Monotonic source of logical time.
///
/// Cheap to clone; clones observe the same instant stream.
#[derive(Clone)]
pub struct Clock {
    inner: Inner,
}

impl Clock {
    /// A virtual clock starting at zero. Advanced explicitly by the driver.
    pub fn virtual_clock() -> Self {
        Clock {
            inner: Inner::Virtual(Arc::new(AtomicU64::new(0))),
        }
    }

    /// A real-time clock anchored at "now". `time_scale` maps wall time to
    /// logical time: one wall millisecond counts as `time_scale` logical
    /// milliseconds, so a scaled run reports unscaled-magnitude numbers.
    pub fn real_time(time_scale: u64) -> Self {
        assert!(time_scale >= 1, "time_scale must be >= 1");
        Clock {
            inner: Inner::Real {
                origin: Instant::now(),
                scale: time_scale,
            },
        }
    }

    /// Current logical time in milliseconds. Non-decreasing across reads.
    pub fn now_ms(&self) -> TimeMs {
        match &self.inner {
            Inner::Virtual(at) => at.load(Ordering::Acquire),
            Inner::Real { origin, scale } => origin.elapsed().as_millis() as u64 * scale,
        }
    }

    /// True when this is a virtual (simulation) clock.
    pub fn is_virtual(&self) -> bool {
        matches!(self.inner, Inner::Virtual(_))
    }

    /// Advance a virtual clock to `t`. Panics on a real clock or when `t`
    /// would move time backwards; the event loop is the single writer.
    pub fn advance_to(&self, t: TimeMs) {
        match &self.inner {
            Inner::Virtual(at) => {
                let prev = at.swap(t, Ordering::AcqRel);
                assert!(prev <= t, "virtual clock moved backwards: {prev} -> {t}");
            }
            Inner::Real { .. } => panic!("advance_to on a real-time clock"),
        }
    }

    /// Wall-clock duration to sleep for `logical_ms` of logical time.
    /// Identity at scale 1; shorter under compression. Virtual clocks never
    /// sleep, so this is only meaningful in real-time mode.
    pub fn wall_duration(&self, logical_ms: u64) -> std::time::Duration {
        match &self.inner {
            Inner::Virtual(_) => std::time::Duration::from_millis(logical_ms),
            Inner::Real { scale, .. } => std::time::Duration::from_millis(logical_ms / scale),
        }
    }
}

impl std::fmt::Debug for Clock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.inner {
            Inner::Virtual(_) => write!(f, "Clock::Virtual(t={})", self.now_ms()),
            Inner::Real { scale, .. } => write!(f, "Clock::Real(scale={scale})"),
        }
    }
}
