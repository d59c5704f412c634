use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Herald,
    Ready,
    Expired,
    Readout,
    SwapSuccess,
    SwapFailure,
    Transfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub repetition: u64,
    pub time: f64,
    /// Link, station or node the event belongs to.
    pub node: String,
    pub kind: EventKind,
    pub detail: String,
}

/// Sorts by repetition, then time, with ties broken by (node id, kind).
/// The sort is stable, so equal keys keep insertion order.
pub fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| {
        a.repetition
            .cmp(&b.repetition)
            .then(a.time.total_cmp(&b.time))
            .then_with(|| a.node.cmp(&b.node))
            .then(a.kind.cmp(&b.kind))
    });
}

struct Entry<T> {
    time: f64,
    node: String,
    kind: EventKind,
    seq: u64,
    payload: T,
}

impl<T> Entry<T> {
    fn key(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.node.cmp(&other.node))
            .then(self.kind.cmp(&other.kind))
            .then(self.seq.cmp(&other.seq))
    }
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.key(other) == Ordering::Equal
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.key(self)
    }
}

/// Single-threaded priority queue with deterministic ordering:
/// time, then node id, then kind, then insertion order.
pub struct EventQueue<T> {
    heap: BinaryHeap<Entry<T>>,
    seq: u64,
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }
}

impl<T> EventQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, node: &str, kind: EventKind, payload: T) {
        self.heap.push(Entry {
            time,
            node: node.to_string(),
            kind,
            seq: self.seq,
            payload,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, String, EventKind, T)> {
        self.heap.pop().map(|e| (e.time, e.node, e.kind, e.payload))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
