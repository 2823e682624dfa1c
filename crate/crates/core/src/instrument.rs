//! Forward-pass counters for checking the single-pass evaluation contract.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

#[derive(Debug, Default)]
struct Counts {
    stochastic: AtomicUsize,
    deterministic: AtomicUsize,
    heads: AtomicUsize,
}

/// Shared counters; clones count into the same totals.
#[derive(Clone, Debug, Default)]
pub struct PassCounter(Arc<Counts>);

/// Per-image forward passes by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub stochastic: usize,
    pub deterministic: usize,
    pub heads: usize,
}

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn stochastic(&self, images: usize) {
        self.0.stochastic.fetch_add(images, Ordering::Relaxed);
    }

    pub(crate) fn deterministic(&self, images: usize) {
        self.0.deterministic.fetch_add(images, Ordering::Relaxed);
    }

    pub(crate) fn heads(&self, images: usize) {
        self.0.heads.fetch_add(images, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> PassCounts {
        PassCounts {
            stochastic: self.0.stochastic.load(Ordering::Relaxed),
            deterministic: self.0.deterministic.load(Ordering::Relaxed),
            heads: self.0.heads.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.0.stochastic.store(0, Ordering::Relaxed);
        self.0.deterministic.store(0, Ordering::Relaxed);
        self.0.heads.store(0, Ordering::Relaxed);
    }
}
