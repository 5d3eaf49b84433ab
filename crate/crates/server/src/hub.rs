//! Fan-out of session events to subscribers.
//!
//! Each subscriber has its own bounded queue. When a queue is full the oldest
//! droppable event (`frame`, `cursor_moved`) is discarded to make room; control
//! events are never discarded, so a queue holding only control events may
//! exceed the bound.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, Weak};

use scope_core::session::{SessionEvent, SessionSnapshot};
use tokio::sync::Notify;

#[derive(Debug, Default)]
struct QueueState {
    items: VecDeque<SessionEvent>,
    pending_dropped: u64,
    total_dropped: u64,
    closed: bool,
}

impl QueueState {
    fn push(&mut self, event: SessionEvent, capacity: usize) {
        if self.items.len() >= capacity {
            if let Some(i) = self.items.iter().position(|e| e.body.is_droppable()) {
                self.items.remove(i);
                self.count_drop();
            } else if event.body.is_droppable() {
                self.count_drop();
                return;
            }
        }
        self.items.push_back(event);
    }

    fn count_drop(&mut self) {
        self.pending_dropped += 1;
        self.total_dropped += 1;
    }
}

#[derive(Debug, Default)]
struct SubscriberQueue {
    state: Mutex<QueueState>,
    notify: Notify,
}

/// What a subscriber sees first.
#[derive(Debug, Clone, PartialEq)]
pub enum Initial {
    /// State as of the last published event.
    Snapshot(SessionSnapshot),
    /// Every event after the requested sequence number.
    Resume(Vec<SessionEvent>),
}

/// Events taken from a subscriber queue in one go.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Batch {
    pub events: Vec<SessionEvent>,
    /// `(since last batch, total)` when events were dropped.
    pub dropped: Option<(u64, u64)>,
    /// The session has ended and nothing more will arrive.
    pub closed: bool,
}

impl Batch {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty() && self.dropped.is_none()
    }
}

#[derive(Debug)]
pub struct Subscription {
    queue: Arc<SubscriberQueue>,
    pub initial: Initial,
}

impl Subscription {
    pub fn try_drain(&self) -> Batch {
        let mut s = self.queue.state.lock().expect("queue lock");
        let dropped = (s.pending_dropped > 0).then_some((s.pending_dropped, s.total_dropped));
        s.pending_dropped = 0;
        Batch {
            events: s.items.drain(..).collect(),
            dropped,
            closed: s.closed,
        }
    }

    /// Waits for at least one event, a drop report or the end of the session.
    /// Cancel-safe.
    pub async fn next_batch(&self) -> Batch {
        loop {
            let notified = self.queue.notify.notified();
            let batch = self.try_drain();
            if !batch.is_empty() || batch.closed {
                return batch;
            }
            notified.await;
        }
    }

    pub fn queued(&self) -> usize {
        self.queue.state.lock().expect("queue lock").items.len()
    }
}

#[derive(Debug, Default)]
struct Inner {
    history: Vec<SessionEvent>,
    snapshot: SessionSnapshot,
    subscribers: Vec<Weak<SubscriberQueue>>,
    closed: bool,
}

#[derive(Debug)]
pub struct Hub {
    capacity: usize,
    inner: Mutex<Inner>,
}

impl Hub {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn publish(&self, events: &[SessionEvent]) {
        if events.is_empty() {
            return;
        }
        let mut inner = self.inner.lock().expect("hub lock");
        for e in events {
            inner.snapshot.apply(e);
        }
        inner.history.extend_from_slice(events);
        inner.subscribers.retain(|w| w.strong_count() > 0);
        for sub in inner.subscribers.iter().filter_map(Weak::upgrade) {
            {
                let mut q = sub.state.lock().expect("queue lock");
                for e in events {
                    q.push(e.clone(), self.capacity);
                }
            }
            sub.notify.notify_one();
        }
    }

    /// Registers a subscriber. With `since`, the subscriber gets every event
    /// whose sequence number is greater; otherwise the current snapshot. Either
    /// way the live tail follows without gaps or repeats.
    pub fn subscribe(&self, since: Option<u64>) -> Subscription {
        let mut inner = self.inner.lock().expect("hub lock");
        let initial = match since {
            Some(s) => Initial::Resume(inner.history.iter().filter(|e| e.seq > s).cloned().collect()),
            None => Initial::Snapshot(inner.snapshot.clone()),
        };
        let queue = Arc::new(SubscriberQueue::default());
        queue.state.lock().expect("queue lock").closed = inner.closed;
        inner.subscribers.push(Arc::downgrade(&queue));
        Subscription { queue, initial }
    }

    /// Marks the stream finished; subscribers drain what is queued.
    pub fn close(&self) {
        let mut inner = self.inner.lock().expect("hub lock");
        inner.closed = true;
        for sub in inner.subscribers.iter().filter_map(Weak::upgrade) {
            sub.state.lock().expect("queue lock").closed = true;
            sub.notify.notify_one();
        }
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        self.inner.lock().expect("hub lock").snapshot.clone()
    }

    pub fn events(&self) -> Vec<SessionEvent> {
        self.inner.lock().expect("hub lock").history.clone()
    }

    pub fn subscriber_count(&self) -> usize {
        let inner = self.inner.lock().expect("hub lock");
        inner.subscribers.iter().filter(|w| w.strong_count() > 0).count()
    }
}
