use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use tokio::sync::Notify;

use crate::ids::ClientId;

/// Default bound on queued outbound packets per session.
pub const DEFAULT_QUEUE_CAPACITY: usize = 1000;

/// Bounded FIFO of encoded packets awaiting the connection writer. When
/// full, the oldest packet is dropped.
pub struct OutboundQueue {
    inner: Mutex<VecDeque<Arc<Vec<u8>>>>,
    capacity: usize,
    notify: Notify,
    closed: AtomicBool,
    overflowed: AtomicU64,
}

impl OutboundQueue {
    pub fn new(capacity: usize) -> Self {
        OutboundQueue {
            inner: Mutex::new(VecDeque::new()),
            capacity: capacity.max(1),
            notify: Notify::new(),
            closed: AtomicBool::new(false),
            overflowed: AtomicU64::new(0),
        }
    }

    /// Returns false if an old packet had to be dropped.
    pub fn push(&self, packet: Arc<Vec<u8>>) -> bool {
        let mut dropped = false;
        {
            let mut q = self.inner.lock().expect("queue lock");
            if q.len() == self.capacity {
                q.pop_front();
                dropped = true;
            }
            q.push_back(packet);
        }
        if dropped {
            self.overflowed.fetch_add(1, Ordering::Relaxed);
        }
        self.notify.notify_one();
        !dropped
    }

    pub fn try_pop(&self) -> Option<Arc<Vec<u8>>> {
        self.inner.lock().expect("queue lock").pop_front()
    }

    /// Next packet, or `None` once the queue is closed and drained.
    pub async fn pop(&self) -> Option<Arc<Vec<u8>>> {
        loop {
            let notified = self.notify.notified();
            if let Some(p) = self.try_pop() {
                return Some(p);
            }
            if self.closed.load(Ordering::Acquire) {
                return None;
            }
            notified.await;
        }
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
        self.notify.notify_waiters();
        self.notify.notify_one();
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("queue lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overflowed(&self) -> u64 {
        self.overflowed.load(Ordering::Relaxed)
    }
}

/// A live client connection as seen by the broker.
pub struct Session {
    pub client_id: ClientId,
    /// Distinguishes a session from a later one that took over its id.
    pub conn_id: u64,
    pub connected_at: SystemTime,
    pub queue: OutboundQueue,
    bytes_out: AtomicU64,
    /// Signalled when another connection takes over this client id.
    pub(crate) kicked: Notify,
}

impl Session {
    pub(crate) fn new(client_id: ClientId, conn_id: u64, queue_capacity: usize) -> Arc<Self> {
        Arc::new(Session {
            client_id,
            conn_id,
            connected_at: SystemTime::now(),
            queue: OutboundQueue::new(queue_capacity),
            bytes_out: AtomicU64::new(0),
            kicked: Notify::new(),
        })
    }

    pub fn bytes_out(&self) -> u64 {
        self.bytes_out.load(Ordering::Relaxed)
    }

    pub(crate) fn record_sent(&self, n: usize) {
        self.bytes_out.fetch_add(n as u64, Ordering::Relaxed);
    }
}
