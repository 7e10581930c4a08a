//! Per-channel submission/completion rings with one worker thread.
//!
//! The worker is the sole consumer of the submission ring and sole
//! producer of the completion ring. It parks on a wait signal when idle
//! and wakes on submit. A full completion ring blocks the worker (never
//! drops); draining completions releases it. Shutdown completes every
//! queued entry with ok-or-flushed status and then joins the worker.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::error::{Error, Result};
use crate::ring::Ring;

/// Work executed by the channel worker. `FabricPost` carries an arbitrary
/// post closure so the engine stays decoupled from the fabric; `SleepTest`
/// exists purely to exercise park/wake races in tests.
pub enum WorkItem {
    Noop,
    Copy {
        src: Arc<Vec<u8>>,
        dst: Arc<Mutex<Vec<u8>>>,
    },
    FabricPost(Box<dyn FnOnce() -> Result<u64> + Send>),
    SleepTest {
        micros: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompletionStatus {
    Ok,
    Flushed,
    Error(Error),
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub seq: u64,
    pub status: CompletionStatus,
    pub latency: Duration,
    pub metadata: u64,
}

struct Submission {
    seq: u64,
    item: WorkItem,
}

struct SubSide {
    ring: Ring<Submission>,
    next_seq: u64,
    shutdown: bool,
    paused: bool,
}

struct Shared {
    sub: Mutex<SubSide>,
    sub_cv: Condvar,
    comp: Mutex<Ring<Completion>>,
    comp_space: Condvar,
    discard_completions: AtomicBool,
    finished: Mutex<bool>,
    finished_cv: Condvar,
    submitted: AtomicU64,
    completed: AtomicU64,
}

/// A command channel. Submit and poll are safe from multiple contexts;
/// shutdown is idempotent and joinable from any context.
pub struct Channel {
    shared: Arc<Shared>,
    worker: Mutex<Option<std::thread::JoinHandle<()>>>,
}

impl Channel {
    /// Capacities must be powers of two >= 2. The worker starts parked.
    pub fn create(sub_capacity: usize, comp_capacity: usize) -> Result<Channel> {
        let shared = Arc::new(Shared {
            sub: Mutex::new(SubSide {
                ring: Ring::with_capacity(sub_capacity)?,
                next_seq: 0,
                shutdown: false,
                paused: false,
            }),
            sub_cv: Condvar::new(),
            comp: Mutex::new(Ring::with_capacity(comp_capacity)?),
            comp_space: Condvar::new(),
            discard_completions: AtomicBool::new(false),
            finished: Mutex::new(false),
            finished_cv: Condvar::new(),
            submitted: AtomicU64::new(0),
            completed: AtomicU64::new(0),
        });
        let worker_shared = shared.clone();
        let worker = std::thread::Builder::new()
            .name("dmaplane-chan".into())
            .spawn(move || worker_loop(worker_shared))
            .map_err(|e| Error::ResourceExhausted(e.to_string()))?;
        Ok(Channel {
            shared,
            worker: Mutex::new(Some(worker)),
        })
    }

    /// Returns the assigned sequence number; `WouldBlock` when the
    /// submission ring is full (caller retries).
    pub fn submit(&self, item: WorkItem) -> Result<u64> {
        let mut s = self.shared.sub.lock();
        if s.shutdown {
            return Err(Error::StaleHandle("channel shut down".into()));
        }
        if s.ring.is_full() {
            return Err(Error::WouldBlock);
        }
        let seq = s.next_seq;
        s.next_seq += 1;
        s.ring
            .push(Submission { seq, item })
            .unwrap_or_else(|_| unreachable!("full checked above"));
        self.shared.submitted.fetch_add(1, Ordering::Relaxed);
        self.shared.sub_cv.notify_all();
        Ok(seq)
    }

    /// Dequeues up to `max` completions in arrival order; never blocks.
    /// Remains usable after shutdown to drain final completions.
    pub fn poll_completions(&self, max: usize) -> Vec<Completion> {
        let mut out = Vec::new();
        let mut c = self.shared.comp.lock();
        while out.len() < max {
            match c.pop() {
                Some(e) => out.push(e),
                None => break,
            }
        }
        if !out.is_empty() {
            self.shared.comp_space.notify_all();
        }
        out
    }

    /// Test hook: park the worker after the entry in flight finishes.
    pub fn pause(&self) {
        self.shared.sub.lock().paused = true;
    }

    pub fn resume(&self) {
        let mut s = self.shared.sub.lock();
        s.paused = false;
        self.shared.sub_cv.notify_all();
    }

    /// Completes all queued entries (ok or flushed), then joins the
    /// worker. Idempotent.
    pub fn shutdown(&self) {
        {
            let mut s = self.shared.sub.lock();
            s.shutdown = true;
            self.shared.sub_cv.notify_all();
        }
        if let Some(handle) = self.worker.lock().take() {
            let _ = handle.join();
            let mut fin = self.shared.finished.lock();
            *fin = true;
            self.shared.finished_cv.notify_all();
        } else {
            let mut fin = self.shared.finished.lock();
            while !*fin {
                self.shared.finished_cv.wait(&mut fin);
            }
        }
    }

    pub fn submitted(&self) -> u64 {
        self.shared.submitted.load(Ordering::Relaxed)
    }

    pub fn completed(&self) -> u64 {
        self.shared.completed.load(Ordering::Relaxed)
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        // The worker must never block on a completion ring nobody will
        // drain again.
        self.shared.discard_completions.store(true, Ordering::Release);
        self.shared.comp_space.notify_all();
        self.shutdown();
    }
}

fn worker_loop(shared: Arc<Shared>) {
    loop {
        let next = {
            let mut s = shared.sub.lock();
            loop {
                if s.paused && !s.shutdown {
                    shared.sub_cv.wait(&mut s);
                    continue;
                }
                if let Some(entry) = s.ring.pop() {
                    break Some((entry, s.shutdown));
                }
                if s.shutdown {
                    break None;
                }
                shared.sub_cv.wait(&mut s);
            }
        };
        let Some((entry, draining)) = next else { break };
        let start = Instant::now();
        let (status, metadata) = if draining {
            (CompletionStatus::Flushed, 0)
        } else {
            execute(entry.item)
        };
        deliver(
            &shared,
            Completion {
                seq: entry.seq,
                status,
                latency: start.elapsed(),
                metadata,
            },
        );
    }
}

fn execute(item: WorkItem) -> (CompletionStatus, u64) {
    match item {
        WorkItem::Noop => (CompletionStatus::Ok, 0),
        WorkItem::Copy { src, dst } => {
            let mut d = dst.lock();
            if d.len() < src.len() {
                return (
                    CompletionStatus::Error(Error::InvalidArgument(format!(
                        "copy destination {} < source {}",
                        d.len(),
                        src.len()
                    ))),
                    0,
                );
            }
            d[..src.len()].copy_from_slice(&src);
            (CompletionStatus::Ok, src.len() as u64)
        }
        WorkItem::FabricPost(f) => match f() {
            Ok(meta) => (CompletionStatus::Ok, meta),
            Err(e) => (CompletionStatus::Error(e), 0),
        },
        WorkItem::SleepTest { micros } => {
            std::thread::sleep(Duration::from_micros(micros));
            (CompletionStatus::Ok, micros)
        }
    }
}

fn deliver(shared: &Shared, mut completion: Completion) {
    let mut c = shared.comp.lock();
    loop {
        if shared.discard_completions.load(Ordering::Acquire) {
            shared.completed.fetch_add(1, Ordering::Relaxed);
            return;
        }
        match c.push(completion) {
            Ok(()) => {
                shared.completed.fetch_add(1, Ordering::Relaxed);
                return;
            }
            Err(back) => {
                completion = back;
                shared.comp_space.wait(&mut c);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if cond() {
                return true;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        cond()
    }

    #[test]
    fn bad_capacity_rejected() {
        assert!(Channel::create(3, 8).is_err());
        assert!(Channel::create(8, 0).is_err());
        assert!(Channel::create(8, 8).is_ok());
    }

    #[test]
    fn completions_arrive_in_submission_order() {
        // Oracle: a sequential executor completes entries in submission
        // order, so completion seqs must equal the submitted seqs in order.
        let ch = Channel::create(8, 8).unwrap();
        let seqs: Vec<u64> = (0..3).map(|_| ch.submit(WorkItem::Noop).unwrap()).collect();
        assert!(wait_until(Duration::from_secs(5), || ch.completed() == 3));
        let comps = ch.poll_completions(16);
        assert_eq!(comps.iter().map(|c| c.seq).collect::<Vec<_>>(), seqs);
        assert!(comps.iter().all(|c| c.status == CompletionStatus::Ok));
    }

    #[test]
    fn full_submission_ring_would_block() {
        let ch = Channel::create(8, 8).unwrap();
        ch.pause();
        for _ in 0..8 {
            ch.submit(WorkItem::Noop).unwrap();
        }
        assert_eq!(ch.submit(WorkItem::Noop), Err(Error::WouldBlock));
        ch.resume();
        assert!(wait_until(Duration::from_secs(5), || ch.completed() == 8));
    }

    #[test]
    fn completion_ring_backpressure_blocks_worker() {
        // Oracle: with nobody polling, a comp ring of 4 stalls the worker
        // after exactly 4 completions; draining resumes it.
        let ch = Channel::create(8, 4).unwrap();
        for _ in 0..8 {
            ch.submit(WorkItem::Noop).unwrap();
        }
        assert!(wait_until(Duration::from_secs(5), || ch.completed() == 4));
        std::thread::sleep(Duration::from_millis(20));
        assert_eq!(ch.completed(), 4, "worker must stall on full comp ring");
        let drained = ch.poll_completions(4);
        assert_eq!(drained.len(), 4);
        assert!(wait_until(Duration::from_secs(5), || ch.completed() == 8));
    }

    #[test]
    fn shutdown_flushes_queued_entries() {
        let ch = Channel::create(8, 8).unwrap();
        ch.pause();
        for _ in 0..5 {
            ch.submit(WorkItem::Noop).unwrap();
        }
        ch.resume();
        ch.shutdown();
        let comps = ch.poll_completions(16);
        assert_eq!(comps.len(), 5);
        assert!(comps
            .iter()
            .all(|c| matches!(c.status, CompletionStatus::Ok | CompletionStatus::Flushed)));
        assert!(matches!(
            ch.submit(WorkItem::Noop),
            Err(Error::StaleHandle(_))
        ));
        ch.shutdown(); // idempotent
    }

    #[test]
    fn copy_item_moves_bytes() {
        let ch = Channel::create(4, 4).unwrap();
        let src = Arc::new(vec![7u8; 128]);
        let dst = Arc::new(Mutex::new(vec![0u8; 128]));
        ch.submit(WorkItem::Copy {
            src: src.clone(),
            dst: dst.clone(),
        })
        .unwrap();
        assert!(wait_until(Duration::from_secs(5), || ch.completed() == 1));
        assert_eq!(*dst.lock(), *src);
    }

    #[test]
    fn conservation_on_shutdown_paths() {
        for queued in 0..6 {
            let ch = Channel::create(8, 8).unwrap();
            for _ in 0..queued {
                ch.submit(WorkItem::Noop).unwrap();
            }
            ch.shutdown();
            let delivered = ch.poll_completions(64).len() as u64;
            assert_eq!(delivered, ch.completed());
            assert_eq!(ch.completed(), ch.submitted());
        }
    }

    #[test]
    fn no_lost_wakeup_under_submit_park_races() {
        let ch = Arc::new(Channel::create(16, 16).unwrap());
        let poller = {
            let ch = ch.clone();
            std::thread::spawn(move || {
                let mut got = 0u64;
                while got < 20_000 {
                    got += ch.poll_completions(16).len() as u64;
                    std::hint::spin_loop();
                }
                got
            })
        };
        let submitters: Vec<_> = (0..2)
            .map(|_| {
                let ch = ch.clone();
                std::thread::spawn(move || {
                    for _ in 0..10_000 {
                        loop {
                            match ch.submit(WorkItem::Noop) {
                                Ok(_) => break,
                                Err(Error::WouldBlock) => std::hint::spin_loop(),
                                Err(e) => panic!("{e}"),
                            }
                        }
                    }
                })
            })
            .collect();
        for s in submitters {
            s.join().unwrap();
        }
        assert_eq!(poller.join().unwrap(), 20_000);
    }
}
