//! Named FIFO message queues shared by all peers.
//!
//! A single [`QueueService`] stands in for a hosted queueing backend. Queues
//! are created on first send, reads are non-destructive (a receiver peeks and
//! must explicitly delete), and every message records a logical enqueue time
//! from a service-wide counter so tests can assert ordering without wall
//! clocks. This read-then-delete shape is what lets the epoch barrier count
//! arrivals repeatedly while it waits.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;

use crate::SimError;

/// One queued message. `id` is unique per service and is the handle used to
/// delete the message after processing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueMessage {
    pub id: u64,
    pub sender_rank: usize,
    pub payload: Vec<u8>,
    pub enqueue_time: u64,
}

#[derive(Default)]
struct QInner {
    queues: BTreeMap<String, VecDeque<QueueMessage>>,
    next_id: u64,
    clock: u64,
}

/// The shared queue service. Safe for concurrent use.
#[derive(Default)]
pub struct QueueService {
    inner: Mutex<QInner>,
}

impl QueueService {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a message to `queue` (creating the queue if needed) and
    /// returns the message id.
    pub fn send(&self, queue: &str, sender_rank: usize, payload: Vec<u8>) -> u64 {
        let mut inner = self.inner.lock().unwrap();
        let id = inner.next_id;
        inner.next_id += 1;
        inner.clock += 1;
        let enqueue_time = inner.clock;
        inner
            .queues
            .entry(queue.to_string())
            .or_default()
            .push_back(QueueMessage {
                id,
                sender_rank,
                payload,
                enqueue_time,
            });
        id
    }

    /// Returns up to `max` messages from the front of `queue`, oldest first,
    /// without removing them. An unknown queue is just empty.
    pub fn receive(&self, queue: &str, max: usize) -> Vec<QueueMessage> {
        let inner = self.inner.lock().unwrap();
        match inner.queues.get(queue) {
            Some(q) => q.iter().take(max).cloned().collect(),
            None => Vec::new(),
        }
    }

    /// Removes the message with `id` from `queue`. Deleting a message that
    /// is not there (or a queue that does not exist) is an error: it means
    /// two consumers raced, which the protocol is designed to avoid.
    pub fn delete(&self, queue: &str, id: u64) -> Result<(), SimError> {
        let mut inner = self.inner.lock().unwrap();
        let q = inner
            .queues
            .get_mut(queue)
            .ok_or_else(|| SimError::NotFound(format!("queue {queue}")))?;
        match q.iter().position(|m| m.id == id) {
            Some(pos) => {
                q.remove(pos);
                Ok(())
            }
            None => Err(SimError::NotFound(format!("message {id} in queue {queue}"))),
        }
    }

    /// Number of messages currently in `queue` (0 for unknown queues).
    pub fn count(&self, queue: &str) -> usize {
        let inner = self.inner.lock().unwrap();
        inner.queues.get(queue).map_or(0, VecDeque::len)
    }

    /// Drops every message in `queue`. Idempotent; purging a queue that was
    /// never created is fine.
    pub fn purge(&self, queue: &str) {
        let mut inner = self.inner.lock().unwrap();
        if let Some(q) = inner.queues.get_mut(queue) {
            q.clear();
        }
    }
}
