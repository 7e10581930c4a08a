//! Observability: counters, gauges, a log2 latency histogram, stats text
//! rendering, and structured event hooks.
//!
//! Stats render as versioned text split into the same five sections the
//! runtime exposes: stats, buffers, rdma, flow, histogram. Events are
//! delivered synchronously on the emitter's context; subscribers must not
//! block. Detach is ordered before the subsystems being observed tear
//! down, and reads after detach fail with a stale-view error instead of
//! touching freed state.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use crate::error::{Error, Result};

/// Sections mirroring the five read-only inspection files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Section {
    Stats,
    Buffers,
    Rdma,
    Flow,
    Histogram,
}

impl Section {
    pub fn name(self) -> &'static str {
        match self {
            Section::Stats => "stats",
            Section::Buffers => "buffers",
            Section::Rdma => "rdma",
            Section::Flow => "flow",
            Section::Histogram => "histogram",
        }
    }
}

pub const HISTOGRAM_BUCKETS: usize = 32;

/// Log2 microsecond latency histogram. Bucket `b` covers `[2^b, 2^(b+1))`
/// microseconds; sub-microsecond samples land in the underflow bucket.
/// Recording is a single atomic increment and never blocks.
pub struct LatencyHistogram {
    underflow: AtomicU64,
    buckets: [AtomicU64; HISTOGRAM_BUCKETS],
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl LatencyHistogram {
    pub fn new() -> Self {
        LatencyHistogram {
            underflow: AtomicU64::new(0),
            buckets: std::array::from_fn(|_| AtomicU64::new(0)),
        }
    }

    pub fn record(&self, latency: Duration) {
        self.record_micros(latency.as_micros() as u64);
    }

    pub fn record_micros(&self, micros: u64) {
        if micros == 0 {
            self.underflow.fetch_add(1, Ordering::Relaxed);
            return;
        }
        let idx = (63 - micros.leading_zeros() as usize).min(HISTOGRAM_BUCKETS - 1);
        self.buckets[idx].fetch_add(1, Ordering::Relaxed);
    }

    pub fn bucket_count(&self, idx: usize) -> u64 {
        self.buckets[idx].load(Ordering::Relaxed)
    }

    pub fn underflow_count(&self) -> u64 {
        self.underflow.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.underflow.load(Ordering::Relaxed)
            + self
                .buckets
                .iter()
                .map(|b| b.load(Ordering::Relaxed))
                .sum::<u64>()
    }

    fn render(&self, out: &mut String) {
        use std::fmt::Write;
        let uf = self.underflow.load(Ordering::Relaxed);
        if uf > 0 {
            writeln!(out, "[0,1) {uf}").unwrap();
        }
        for (i, b) in self.buckets.iter().enumerate() {
            let n = b.load(Ordering::Relaxed);
            if n > 0 {
                writeln!(out, "[{},{}) {}", 1u64 << i, 1u64 << (i + 1), n).unwrap();
            }
        }
    }
}

type GaugeFn = Box<dyn Fn() -> u64 + Send + Sync>;

#[derive(Clone)]
pub struct Counter(Arc<AtomicU64>);

impl Counter {
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn incr(&self) {
        self.add(1);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

#[derive(Default)]
struct StatsInner {
    counters: BTreeMap<(Section, String), Arc<AtomicU64>>,
    gauges: BTreeMap<(Section, String), GaugeFn>,
    histograms: BTreeMap<String, Arc<LatencyHistogram>>,
}

/// Named counters, gauges, and histograms with deterministic text
/// rendering. Registration and rendering take the registry lock; the
/// record paths are plain atomics.
pub struct StatsRegistry {
    inner: Mutex<StatsInner>,
    detached: AtomicBool,
}

impl Default for StatsRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl StatsRegistry {
    pub fn new() -> Self {
        StatsRegistry {
            inner: Mutex::new(StatsInner::default()),
            detached: AtomicBool::new(false),
        }
    }

    pub fn counter(&self, section: Section, name: &str) -> Counter {
        let mut inner = self.inner.lock();
        let cell = inner
            .counters
            .entry((section, name.to_string()))
            .or_insert_with(|| Arc::new(AtomicU64::new(0)))
            .clone();
        Counter(cell)
    }

    /// Register a gauge read via closure at render time. The closure must
    /// be non-blocking.
    pub fn register_gauge(
        &self,
        section: Section,
        name: &str,
        read: impl Fn() -> u64 + Send + Sync + 'static,
    ) {
        self.inner
            .lock()
            .gauges
            .insert((section, name.to_string()), Box::new(read));
    }

    pub fn histogram(&self, name: &str) -> Arc<LatencyHistogram> {
        self.inner
            .lock()
            .histograms
            .entry(name.to_string())
            .or_insert_with(|| Arc::new(LatencyHistogram::new()))
            .clone()
    }

    pub fn is_detached(&self) -> bool {
        self.detached.load(Ordering::Acquire)
    }

    fn detach(&self) {
        self.detached.store(true, Ordering::Release);
    }

    /// Render one section as versioned text: a `dmaplane-stats v1` header
    /// followed by one `name: value` line per counter/gauge, or `[lo,hi)
    /// count` lines for histograms.
    pub fn render(&self, section: Section) -> Result<String> {
        if self.is_detached() {
            return Err(Error::StaleView);
        }
        let inner = self.inner.lock();
        let mut out = String::from("dmaplane-stats v1\n");
        match section {
            Section::Histogram => {
                for (name, h) in &inner.histograms {
                    use std::fmt::Write;
                    writeln!(out, "histogram {name}").unwrap();
                    h.render(&mut out);
                }
            }
            _ => {
                use std::fmt::Write;
                for ((s, name), c) in &inner.counters {
                    if *s == section {
                        writeln!(out, "{name}: {}", c.load(Ordering::Relaxed)).unwrap();
                    }
                }
                for ((s, name), g) in &inner.gauges {
                    if *s == section {
                        writeln!(out, "{name}: {}", g()).unwrap();
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Structured event kinds (tracepoint analog).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    RdmaPost,
    RdmaCompletion,
    FlowStall,
    BufferCreate,
    BufferDestroy,
    Teardown,
}

impl EventKind {
    fn bit(self) -> u8 {
        match self {
            EventKind::RdmaPost => 1,
            EventKind::RdmaCompletion => 2,
            EventKind::FlowStall => 4,
            EventKind::BufferCreate => 8,
            EventKind::BufferDestroy => 16,
            EventKind::Teardown => 32,
        }
    }
}

/// Shutdown phases, in required order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeardownPhase {
    Detach,
    Fabric,
    Registry,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventPayload {
    None,
    Buffer { id: u64, size_bytes: usize },
    Rdma { wr_seq: u64, byte_len: u32 },
    Stall { in_flight: u64 },
    Teardown { phase: TeardownPhase },
}

#[derive(Debug, Clone)]
pub struct Event {
    pub kind: EventKind,
    pub timestamp: Instant,
    pub payload: EventPayload,
}

type EventCallback = Box<dyn Fn(&Event) + Send + Sync>;

struct Subscriber {
    id: u64,
    mask: u8,
    callback: EventCallback,
}

/// Synchronous event fan-out. With zero subscribers, `emit` is a single
/// relaxed atomic load plus branch; payload construction is deferred
/// behind that branch.
pub struct EventHub {
    active: AtomicBool,
    detached: AtomicBool,
    next_id: AtomicU64,
    subs: RwLock<Vec<Subscriber>>,
}

impl Default for EventHub {
    fn default() -> Self {
        Self::new()
    }
}

impl EventHub {
    pub fn new() -> Self {
        EventHub {
            active: AtomicBool::new(false),
            detached: AtomicBool::new(false),
            next_id: AtomicU64::new(1),
            subs: RwLock::new(Vec::new()),
        }
    }

    pub fn subscribe(
        self: &Arc<Self>,
        kinds: &[EventKind],
        callback: impl Fn(&Event) + Send + Sync + 'static,
    ) -> Result<Subscription> {
        if self.detached.load(Ordering::Acquire) {
            return Err(Error::StaleView);
        }
        let mask = kinds.iter().fold(0u8, |m, k| m | k.bit());
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.subs.write().push(Subscriber {
            id,
            mask,
            callback: Box::new(callback),
        });
        self.active.store(true, Ordering::Release);
        Ok(Subscription {
            id,
            hub: Arc::downgrade(self),
        })
    }

    #[inline]
    pub fn emit(&self, kind: EventKind, payload: impl FnOnce() -> EventPayload) {
        if !self.active.load(Ordering::Relaxed) {
            return;
        }
        self.emit_slow(kind, payload());
    }

    fn emit_slow(&self, kind: EventKind, payload: EventPayload) {
        let ev = Event {
            kind,
            timestamp: Instant::now(),
            payload,
        };
        let subs = self.subs.read();
        for s in subs.iter() {
            if s.mask & kind.bit() != 0 {
                (s.callback)(&ev);
            }
        }
    }

    fn unsubscribe(&self, id: u64) {
        let mut subs = self.subs.write();
        subs.retain(|s| s.id != id);
        if subs.is_empty() {
            self.active.store(false, Ordering::Release);
        }
    }
}

/// Subscription guard; dropping it unsubscribes.
pub struct Subscription {
    id: u64,
    hub: std::sync::Weak<EventHub>,
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(hub) = self.hub.upgrade() {
            hub.unsubscribe(self.id);
        }
    }
}

/// Bundle of the stats registry and event hub with the detach discipline:
/// detach emits the first teardown event, then invalidates stats reads and
/// new subscriptions. Existing subscribers keep receiving teardown-phase
/// events so the shutdown order stays observable.
pub struct Observability {
    pub stats: Arc<StatsRegistry>,
    pub events: Arc<EventHub>,
}

impl Default for Observability {
    fn default() -> Self {
        Self::new()
    }
}

impl Observability {
    pub fn new() -> Self {
        Observability {
            stats: Arc::new(StatsRegistry::new()),
            events: Arc::new(EventHub::new()),
        }
    }

    /// Idempotent. Ordered before fabric teardown and registry destruction
    /// in a composed shutdown.
    pub fn detach(&self) {
        if self.events.detached.swap(true, Ordering::AcqRel) {
            return;
        }
        self.events.emit(EventKind::Teardown, || EventPayload::Teardown {
            phase: TeardownPhase::Detach,
        });
        self.stats.detach();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_buckets_follow_log2_micros() {
        // Oracle: bucket index for a latency of m µs (m >= 1) is floor(log2(m)).
        let h = LatencyHistogram::new();
        for micros in [1u64, 3, 3] {
            h.record_micros(micros);
        }
        assert_eq!(h.bucket_count(0), 1); // [1,2)
        assert_eq!(h.bucket_count(1), 2); // [2,4)
        assert_eq!(h.total(), 3);
        for micros in 1..5000u64 {
            let expected = 63 - micros.leading_zeros() as usize;
            let h2 = LatencyHistogram::new();
            h2.record_micros(micros);
            assert_eq!(h2.bucket_count(expected), 1, "micros={micros}");
        }
    }

    #[test]
    fn sub_microsecond_goes_to_underflow() {
        let h = LatencyHistogram::new();
        h.record(Duration::from_nanos(200));
        assert_eq!(h.underflow_count(), 1);
    }

    #[test]
    fn render_empty_section_is_header_only() {
        let s = StatsRegistry::new();
        assert_eq!(s.render(Section::Stats).unwrap(), "dmaplane-stats v1\n");
    }

    #[test]
    fn render_contains_counter_line() {
        let s = StatsRegistry::new();
        let c = s.counter(Section::Stats, "posts");
        c.add(3);
        let text = s.render(Section::Stats).unwrap();
        assert!(text.contains("posts: 3"), "{text}");
    }

    #[test]
    fn render_histogram_lines() {
        let s = StatsRegistry::new();
        let h = s.histogram("op_latency");
        h.record_micros(1);
        h.record_micros(3);
        h.record_micros(3);
        let text = s.render(Section::Histogram).unwrap();
        assert!(text.contains("[1,2) 1"), "{text}");
        assert!(text.contains("[2,4) 2"), "{text}");
    }

    #[test]
    fn detach_makes_reads_stale() {
        let obs = Observability::new();
        obs.stats.counter(Section::Stats, "x");
        obs.detach();
        assert_eq!(obs.stats.render(Section::Stats), Err(Error::StaleView));
        let r = obs.events.subscribe(&[EventKind::Teardown], |_| {});
        assert!(matches!(r, Err(Error::StaleView)));
        obs.detach(); // idempotent
    }

    #[test]
    fn detach_emits_teardown_event_first() {
        let obs = Observability::new();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        let _sub = obs
            .events
            .subscribe(&[EventKind::Teardown], move |e| {
                seen2.lock().push(e.payload.clone());
            })
            .unwrap();
        obs.detach();
        assert_eq!(
            seen.lock().as_slice(),
            &[EventPayload::Teardown {
                phase: TeardownPhase::Detach
            }]
        );
    }

    #[test]
    fn no_subscriber_emission_is_inert() {
        let hub = EventHub::new();
        for _ in 0..1000 {
            hub.emit(EventKind::RdmaPost, || unreachable!("payload must not build"));
        }
    }

    #[test]
    fn drop_subscription_stops_delivery() {
        let hub = Arc::new(EventHub::new());
        let n = Arc::new(AtomicU64::new(0));
        let n2 = n.clone();
        let sub = hub
            .subscribe(&[EventKind::FlowStall], move |_| {
                n2.fetch_add(1, Ordering::Relaxed);
            })
            .unwrap();
        hub.emit(EventKind::FlowStall, || EventPayload::None);
        drop(sub);
        hub.emit(EventKind::FlowStall, || EventPayload::None);
        assert_eq!(n.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn histogram_conservation_under_concurrency() {
        let h = Arc::new(LatencyHistogram::new());
        let threads: Vec<_> = (0..4)
            .map(|t| {
                let h = h.clone();
                std::thread::spawn(move || {
                    for i in 0..10_000u64 {
                        h.record_micros(t * 1000 + i % 97);
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(h.total(), 40_000);
    }
}
