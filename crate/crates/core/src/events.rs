//! Run-level event accounting: divergences, numerical repairs, fallbacks.
//!
//! Filters and trainers never abort the surrounding run on a recoverable
//! numerical event; they record it here so the harness can report counts.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    /// A trajectory or training run produced a non-finite value and was aborted.
    NonFinite,
    /// Particle weights all underflowed to zero.
    WeightCollapse,
    /// A covariance solve needed jitter to become positive definite.
    JitterApplied,
    /// An EKF-based proposal failed and the wide Gaussian fallback was used.
    ProposalFallback,
    /// Importance-sampling effective sample size fell below the floor.
    LowEss,
    /// A training run diverged and was recorded rather than propagated.
    TrainingDiverged,
    /// A model coefficient was clamped to keep rates nonnegative.
    DomainClamp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub detail: String,
}

/// Ordered log of events for one run.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, kind: EventKind, detail: impl Into<String>) {
        self.events.push(Event {
            kind,
            detail: detail.into(),
        });
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Merge another log, preserving order.
    pub fn absorb(&mut self, other: EventLog) {
        self.events.extend(other.events);
    }
}
