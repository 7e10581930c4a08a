//! Fixed-size circular buffer with free-running head and tail counters.
//!
//! Indices are free-running and masked on access, which removes the
//! full/empty ambiguity: occupancy is `tail - head`, full at capacity,
//! empty at zero. The head only advances on consume and the tail only on
//! produce.

use crate::error::{Error, Result};

pub struct Ring<T> {
    entries: Vec<Option<T>>,
    mask: u64,
    head: u64,
    tail: u64,
}

impl<T> Ring<T> {
    /// Capacity must be a power of two >= 2.
    pub fn with_capacity(capacity: usize) -> Result<Ring<T>> {
        if capacity < 2 || !capacity.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "ring capacity must be a power of two >= 2, got {capacity}"
            )));
        }
        Ring {
            entries: (0..capacity).map(|_| None).collect(),
            mask: capacity as u64 - 1,
            head: 0,
            tail: 0,
        }
        .into_ok()
    }

    fn into_ok(self) -> Result<Ring<T>> {
        Ok(self)
    }

    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    pub fn occupancy(&self) -> usize {
        (self.tail - self.head) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.head == self.tail
    }

    pub fn is_full(&self) -> bool {
        self.occupancy() == self.capacity()
    }

    /// Produce; returns the entry back if the ring is full.
    pub fn push(&mut self, entry: T) -> std::result::Result<(), T> {
        if self.is_full() {
            return Err(entry);
        }
        let slot = (self.tail & self.mask) as usize;
        debug_assert!(self.entries[slot].is_none());
        self.entries[slot] = Some(entry);
        self.tail += 1;
        debug_assert!(self.occupancy() <= self.capacity());
        Ok(())
    }

    /// Consume in FIFO order.
    pub fn pop(&mut self) -> Option<T> {
        if self.is_empty() {
            return None;
        }
        let slot = (self.head & self.mask) as usize;
        let entry = self.entries[slot].take();
        debug_assert!(entry.is_some());
        self.head += 1;
        debug_assert!(self.occupancy() <= self.capacity());
        entry
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_power_of_two() {
        assert!(Ring::<u32>::with_capacity(3).is_err());
        assert!(Ring::<u32>::with_capacity(0).is_err());
        assert!(Ring::<u32>::with_capacity(1).is_err());
        assert!(Ring::<u32>::with_capacity(8).is_ok());
    }

    #[test]
    fn fifo_and_wraparound() {
        let mut r = Ring::with_capacity(4).unwrap();
        for round in 0..10u32 {
            for i in 0..4 {
                r.push(round * 10 + i).unwrap();
            }
            assert!(r.is_full());
            assert!(r.push(99).is_err());
            for i in 0..4 {
                assert_eq!(r.pop(), Some(round * 10 + i));
            }
            assert!(r.is_empty());
            assert_eq!(r.pop(), None);
        }
    }

    #[test]
    fn occupancy_tracks_produce_consume() {
        let mut r = Ring::with_capacity(8).unwrap();
        r.push(1).unwrap();
        r.push(2).unwrap();
        assert_eq!(r.occupancy(), 2);
        r.pop();
        assert_eq!(r.occupancy(), 1);
    }
}
