use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

/// Kinds of pending events, listed in tie-breaking priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Departure,
    PhaseJump,
    SetupComplete,
    StandbyExpiry,
    Arrival,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    /// Server the event belongs to; zero for arrivals and samples.
    pub server: usize,
    /// Timer generation, compared against the server's current epoch to
    /// discard cancelled timers.
    pub epoch: u64,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.cmp(&other.kind))
            .then(self.server.cmp(&other.server))
            .then(self.epoch.cmp(&other.epoch))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Time-ordered calendar of pending events. Equal times resolve by
/// [`EventKind`] order, then by ascending server id.
#[derive(Debug, Default)]
pub struct EventSchedule {
    heap: BinaryHeap<Reverse<Event>>,
}

impl EventSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { heap: BinaryHeap::with_capacity(n) }
    }

    pub fn push(&mut self, event: Event) {
        self.heap.push(Reverse(event));
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    pub fn peek(&self) -> Option<&Event> {
        self.heap.peek().map(|Reverse(e)| e)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Pending events of one kind for one server.
    pub fn pending(&self, kind: EventKind, server: usize) -> usize {
        self.heap.iter().filter(|Reverse(e)| e.kind == kind && e.server == server).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(time: f64, kind: EventKind, server: usize) -> Event {
        Event { time, kind, server, epoch: 0 }
    }

    #[test]
    fn ties_follow_kind_then_server() {
        let mut s = EventSchedule::new();
        s.push(ev(1.0, EventKind::Sample, 0));
        s.push(ev(1.0, EventKind::Arrival, 0));
        s.push(ev(1.0, EventKind::StandbyExpiry, 2));
        s.push(ev(1.0, EventKind::StandbyExpiry, 1));
        s.push(ev(1.0, EventKind::SetupComplete, 7));
        s.push(ev(1.0, EventKind::Departure, 9));
        s.push(ev(0.5, EventKind::Sample, 0));
        let order: Vec<(EventKind, usize)> = std::iter::from_fn(|| s.pop()).map(|e| (e.kind, e.server)).collect();
        assert_eq!(
            order,
            vec![
                (EventKind::Sample, 0),
                (EventKind::Departure, 9),
                (EventKind::SetupComplete, 7),
                (EventKind::StandbyExpiry, 1),
                (EventKind::StandbyExpiry, 2),
                (EventKind::Arrival, 0),
                (EventKind::Sample, 0),
            ]
        );
    }
}
