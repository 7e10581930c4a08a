//! Runtime lock-order validation.
//!
//! All long-lived locks in the library belong to one of four levels that
//! must be acquired in strictly increasing order within an execution
//! context: device (0), then fabric (1), then buffer (2), then region (3).
//! The validator tracks the held-level stack per thread and reports an
//! inversion whenever a lock is acquired while any held lock has a level
//! greater than or equal to the one being acquired.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

/// Global acquisition order: device < fabric < buffer < region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum LockLevel {
    Device = 0,
    Fabric = 1,
    Buffer = 2,
    Region = 3,
}

impl LockLevel {
    pub fn from_index(i: u8) -> Option<LockLevel> {
        match i {
            0 => Some(LockLevel::Device),
            1 => Some(LockLevel::Fabric),
            2 => Some(LockLevel::Buffer),
            3 => Some(LockLevel::Region),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LockLevel::Device => "device",
            LockLevel::Fabric => "fabric",
            LockLevel::Buffer => "buffer",
            LockLevel::Region => "region",
        }
    }
}

impl fmt::Display for LockLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name(), *self as u8)
    }
}

/// A reported ordering inversion: `acquiring` was requested while
/// `held` was already held with `held >= acquiring`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderViolation {
    pub held: LockLevel,
    pub acquiring: LockLevel,
}

impl fmt::Display for OrderViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lock order violation: acquiring {} while holding {}",
            self.acquiring, self.held
        )
    }
}

static NEXT_VALIDATOR_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    // Held-level stacks, keyed by validator instance.
    static HELD: RefCell<HashMap<u64, Vec<LockLevel>>> = RefCell::new(HashMap::new());
}

/// Per-execution-context lock-order validator. Opt-in: a disabled
/// validator does nothing on either check path.
pub struct LockOrderValidator {
    id: u64,
    enabled: bool,
    panic_on_violation: bool,
    acquisitions: AtomicU64,
    violation_count: AtomicU64,
    violations: Mutex<Vec<OrderViolation>>,
}

impl LockOrderValidator {
    pub fn new(enabled: bool) -> Self {
        LockOrderValidator {
            id: NEXT_VALIDATOR_ID.fetch_add(1, Ordering::Relaxed),
            enabled,
            panic_on_violation: false,
            acquisitions: AtomicU64::new(0),
            violation_count: AtomicU64::new(0),
            violations: Mutex::new(Vec::new()),
        }
    }

    /// Debug-mode variant: inversions panic instead of only being recorded.
    pub fn panicking() -> Self {
        LockOrderValidator {
            panic_on_violation: true,
            ..LockOrderValidator::new(true)
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// Record an acquisition of `level` on this thread. Returns the
    /// violation report if the acquisition inverts the global order.
    /// The level is pushed on the held stack either way: release-mode
    /// callers proceed with the acquisition.
    pub fn check_lock_acquire(&self, level: LockLevel) -> std::result::Result<(), OrderViolation> {
        if !self.enabled {
            return Ok(());
        }
        self.acquisitions.fetch_add(1, Ordering::Relaxed);
        let conflict = HELD.with(|h| {
            let mut map = h.borrow_mut();
            let stack = map.entry(self.id).or_default();
            let conflict = stack.iter().copied().find(|&held| held >= level);
            stack.push(level);
            conflict
        });
        match conflict {
            None => Ok(()),
            Some(held) => {
                let v = OrderViolation {
                    held,
                    acquiring: level,
                };
                self.violation_count.fetch_add(1, Ordering::Relaxed);
                self.violations.lock().push(v);
                if self.panic_on_violation {
                    panic!("{v}");
                }
                Err(v)
            }
        }
    }

    /// Record the release of `level` on this thread. Removes the most
    /// recently acquired instance of the level; releasing a level that
    /// is not held is ignored.
    pub fn check_lock_release(&self, level: LockLevel) {
        if !self.enabled {
            return;
        }
        HELD.with(|h| {
            let mut map = h.borrow_mut();
            if let Some(stack) = map.get_mut(&self.id) {
                if let Some(pos) = stack.iter().rposition(|&l| l == level) {
                    stack.remove(pos);
                }
            }
        });
    }

    /// Levels currently held by this thread, in acquisition order.
    pub fn held_levels(&self) -> Vec<LockLevel> {
        HELD.with(|h| {
            h.borrow()
                .get(&self.id)
                .cloned()
                .unwrap_or_default()
        })
    }

    /// Total acquisition checks performed (all threads). Lets callers
    /// assert that a code path touched no validated lock.
    pub fn acquisition_count(&self) -> u64 {
        self.acquisitions.load(Ordering::Relaxed)
    }

    pub fn violation_count(&self) -> u64 {
        self.violation_count.load(Ordering::Relaxed)
    }

    pub fn violations(&self) -> Vec<OrderViolation> {
        self.violations.lock().clone()
    }
}
