use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::SimTime;
use crate::error::{Error, Result};

struct Entry<E> {
    at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Min-priority queue of timed events. Events at the same instant fire in
/// insertion order, which makes replay fully deterministic.
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    now: SimTime,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, at: SimTime, event: E) -> Result<()> {
        if at < self.now {
            return Err(Error::input(format!(
                "cannot schedule at {at}, current time is {}",
                self.now
            )));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry { at, seq, event }));
        Ok(())
    }

    /// Schedules `delay` seconds from now.
    pub fn schedule_in(&mut self, delay: f64, event: E) {
        let at = self.now + delay.max(0.0);
        self.schedule(at, event).expect("non-negative delay");
    }

    /// Removes the earliest event and advances the clock to its timestamp.
    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        let Reverse(entry) = self.heap.pop()?;
        self.now = entry.at;
        Some((entry.at, entry.event))
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|Reverse(e)| e.at)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fires_at_scheduled_time() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::secs(3.0), "e").unwrap();
        assert_eq!(q.pop(), Some((SimTime::secs(3.0), "e")));
        assert_eq!(q.now(), SimTime::secs(3.0));
        assert!(q.pop().is_none());
    }

    #[test]
    fn ties_fire_in_insertion_order() {
        let mut q = EventQueue::new();
        let t = SimTime::secs(1.0);
        for i in 0..10 {
            q.schedule(t, i).unwrap();
        }
        q.schedule(SimTime::secs(0.5), 99).unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, vec![99, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::secs(5.0), ()).unwrap();
        q.pop();
        assert!(q.schedule(SimTime::secs(4.0), ()).is_err());
        assert!(q.schedule(SimTime::secs(5.0), ()).is_ok());
    }

    #[test]
    fn clock_never_decreases() {
        let mut q = EventQueue::new();
        for t in [5.0, 1.0, 3.0, 3.0, 0.0, 9.0] {
            q.schedule(SimTime::secs(t), ()).unwrap();
        }
        let mut last = SimTime::ZERO;
        while let Some((t, _)) = q.pop() {
            assert!(t >= last);
            last = t;
        }
    }
}
