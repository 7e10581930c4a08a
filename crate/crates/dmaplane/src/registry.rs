//! Buffer registry: namespace, lifecycle state machine, mapping-count
//! discipline, export/attach sharing with per-importer translation, and
//! revocable external regions.
//!
//! Buffers are named objects referenced by monotonically increasing ids
//! that are never reused within a process lifetime, so a stale id is
//! always distinguishable from an unknown one. A buffer cannot be
//! destroyed while it has active mappings or active importer attachments.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::lock_order::{LockLevel, LockOrderValidator};
use crate::observe::{EventHub, EventKind, EventPayload, TeardownPhase};

pub type BufferId = u64;
pub type RegionId = u64;

/// Allocation path for a buffer. Coherent allocations are reserved for
/// small control structures and respect the configured size ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocClass {
    Coherent,
    PageBacked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferState {
    Live,
    Destroying,
    Destroyed,
}

/// Importer-visible translated segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub importer_address: u64,
    pub length: u64,
}

/// Translation granularity for importer segment tables.
pub const SEGMENT_GRANULE: u64 = 4096;

/// Deterministic stand-in for distinct IOMMU contexts: importer `k` maps
/// buffer offset `o` to `(k << 32) + o`.
pub fn importer_base(importer_id: u64) -> u64 {
    importer_id.wrapping_shl(32)
}

#[derive(Debug, Clone)]
pub struct BufferInfo {
    pub id: BufferId,
    pub size_bytes: usize,
    pub alloc_class: AllocClass,
    pub requested_node: Option<u32>,
    pub actual_node: u32,
    pub mapping_count: u64,
    pub state: BufferState,
    pub exported: bool,
    pub active_attachments: usize,
}

/// Mapping token returned by `map_buffer`; consumed by `unmap_buffer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapToken {
    token: u64,
    buffer: BufferId,
}

impl MapToken {
    pub fn buffer_id(&self) -> BufferId {
        self.buffer
    }
}

struct BufferInner {
    size_bytes: usize,
    alloc_class: AllocClass,
    requested_node: Option<u32>,
    actual_node: u32,
    mapping_count: u64,
    state: BufferState,
    backing: Vec<u8>,
    export: Option<Arc<ExportShared>>,
    live_tokens: HashSet<u64>,
}

struct Buffer {
    id: BufferId,
    inner: Mutex<BufferInner>,
}

struct ExportState {
    active_attachments: usize,
    exporter_dropped: bool,
    released: bool,
}

struct ExportShared {
    buffer_id: BufferId,
    size_bytes: usize,
    state: Mutex<ExportState>,
    buffer_destroyed: AtomicBool,
    release_count: AtomicU64,
    next_attach_id: AtomicU64,
}

impl ExportShared {
    /// Fires release exactly once, when the last attachment has detached
    /// and the exporter has dropped the handle.
    fn maybe_release(&self) {
        let mut st = self.state.lock();
        if st.exporter_dropped && st.active_attachments == 0 && !st.released {
            st.released = true;
            self.release_count.fetch_add(1, Ordering::Relaxed);
        }
    }
}

/// Exporter-side handle for cross-importer sharing. Dropping the handle
/// marks the exporter side done; release fires once all attachments are
/// gone.
pub struct ExportHandle {
    shared: Arc<ExportShared>,
}

impl ExportHandle {
    pub fn buffer_id(&self) -> BufferId {
        self.shared.buffer_id
    }

    pub fn release_count(&self) -> u64 {
        self.shared.release_count.load(Ordering::Relaxed)
    }

    pub fn released(&self) -> bool {
        self.shared.state.lock().released
    }

    /// Observer that outlives the handle, for asserting on the release
    /// that fires when this handle drops.
    pub fn release_probe(&self) -> ReleaseProbe {
        ReleaseProbe {
            shared: self.shared.clone(),
        }
    }

    /// Builds a fresh per-importer segment table. Fails with stale-handle
    /// once the export is released or the buffer destroyed.
    pub fn attach(&self, importer_id: u64) -> Result<ImporterAttachment> {
        if self.shared.buffer_destroyed.load(Ordering::Acquire) {
            return Err(Error::StaleHandle(format!(
                "buffer {} destroyed",
                self.shared.buffer_id
            )));
        }
        {
            let mut st = self.shared.state.lock();
            if st.released {
                return Err(Error::StaleHandle(format!(
                    "export of buffer {} released",
                    self.shared.buffer_id
                )));
            }
            st.active_attachments += 1;
        }
        let base = importer_base(importer_id);
        let size = self.shared.size_bytes as u64;
        let mut segment_table = Vec::new();
        let mut off = 0u64;
        while off < size {
            let len = (size - off).min(SEGMENT_GRANULE);
            segment_table.push(Segment {
                importer_address: base.wrapping_add(off),
                length: len,
            });
            off += len;
        }
        Ok(ImporterAttachment {
            importer_id,
            attach_id: self.shared.next_attach_id.fetch_add(1, Ordering::Relaxed),
            segment_table,
            active: true,
            shared: self.shared.clone(),
        })
    }
}

impl Drop for ExportHandle {
    fn drop(&mut self) {
        self.shared.state.lock().exporter_dropped = true;
        self.shared.maybe_release();
    }
}

/// Read-only view of an export's release state.
pub struct ReleaseProbe {
    shared: Arc<ExportShared>,
}

impl ReleaseProbe {
    pub fn release_count(&self) -> u64 {
        self.shared.release_count.load(Ordering::Relaxed)
    }

    pub fn released(&self) -> bool {
        self.shared.state.lock().released
    }
}

/// One importer's view of an exported buffer. The segment table is built
/// at attach time for this importer only.
pub struct ImporterAttachment {
    pub importer_id: u64,
    pub segment_table: Vec<Segment>,
    attach_id: u64,
    active: bool,
    shared: Arc<ExportShared>,
}

impl ImporterAttachment {
    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn attach_id(&self) -> u64 {
        self.attach_id
    }

    pub fn total_length(&self) -> u64 {
        self.segment_table.iter().map(|s| s.length).sum()
    }

    pub fn detach(&mut self) -> Result<()> {
        if !self.active {
            return Err(Error::InvalidArgument(format!(
                "attachment {} already detached",
                self.attach_id
            )));
        }
        self.active = false;
        {
            let mut st = self.shared.state.lock();
            st.active_attachments -= 1;
        }
        self.shared.maybe_release();
        Ok(())
    }
}

impl Drop for ImporterAttachment {
    fn drop(&mut self) {
        if self.active {
            let _ = self.detach();
        }
    }
}

/// Idempotence indicator for `revoke`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevokeOutcome {
    Revoked,
    AlreadyRevoked,
}

struct RegionState {
    size_bytes: usize,
    revoked: AtomicBool,
    cleanup_pending: AtomicBool,
    cleaned: AtomicBool,
}

#[derive(Debug, Clone, Copy)]
pub struct RegionInfo {
    pub region_id: RegionId,
    pub size_bytes: usize,
    pub revoked: bool,
    pub cleanup_pending: bool,
}

pub struct RegistryConfig {
    /// Coherent allocations are capped at this size (64 KiB by default).
    pub coherent_ceiling: usize,
    pub max_buffers: usize,
    pub validator: Option<Arc<LockOrderValidator>>,
    pub events: Option<Arc<EventHub>>,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            coherent_ceiling: 64 << 10,
            max_buffers: 1 << 20,
            validator: None,
            events: None,
        }
    }
}

struct Shared {
    cfg: RegistryConfig,
    buffers: Mutex<HashMap<BufferId, Arc<Buffer>>>,
    next_buffer_id: AtomicU64,
    next_token: AtomicU64,
    next_region_id: AtomicU64,
    // Regions live outside the buffer map so revocation never waits on a
    // registry lock.
    regions: DashMap<RegionId, Arc<RegionState>>,
    revocable_bytes: AtomicUsize,
    created: AtomicU64,
    destroyed: AtomicU64,
    maps: AtomicU64,
    unmaps: AtomicU64,
}

/// Thread-safe buffer registry. Cloning shares the same namespace.
#[derive(Clone)]
pub struct Registry {
    shared: Arc<Shared>,
}

struct LevelGuard<'a> {
    validator: Option<&'a LockOrderValidator>,
    level: LockLevel,
}

impl<'a> LevelGuard<'a> {
    fn enter(validator: &'a Option<Arc<LockOrderValidator>>, level: LockLevel) -> Self {
        let validator = validator.as_deref();
        if let Some(v) = validator {
            let _ = v.check_lock_acquire(level);
        }
        LevelGuard { validator, level }
    }
}

impl Drop for LevelGuard<'_> {
    fn drop(&mut self) {
        if let Some(v) = self.validator {
            v.check_lock_release(self.level);
        }
    }
}

impl Default for Registry {
    fn default() -> Self {
        Registry::new(RegistryConfig::default())
    }
}

impl Registry {
    pub fn new(cfg: RegistryConfig) -> Registry {
        Registry {
            shared: Arc::new(Shared {
                cfg,
                buffers: Mutex::new(HashMap::new()),
                next_buffer_id: AtomicU64::new(1),
                next_token: AtomicU64::new(1),
                next_region_id: AtomicU64::new(1),
                regions: DashMap::new(),
                revocable_bytes: AtomicUsize::new(0),
                created: AtomicU64::new(0),
                destroyed: AtomicU64::new(0),
                maps: AtomicU64::new(0),
                unmaps: AtomicU64::new(0),
            }),
        }
    }

    fn emit(&self, kind: EventKind, payload: impl FnOnce() -> EventPayload) {
        if let Some(hub) = &self.shared.cfg.events {
            hub.emit(kind, payload);
        }
    }

    fn lookup(&self, id: BufferId) -> Result<Arc<Buffer>> {
        let _g = LevelGuard::enter(&self.shared.cfg.validator, LockLevel::Buffer);
        let map = self.shared.buffers.lock();
        match map.get(&id) {
            Some(b) => Ok(b.clone()),
            None => {
                if id != 0 && id < self.shared.next_buffer_id.load(Ordering::Relaxed) {
                    Err(Error::StaleHandle(format!("buffer {id} destroyed")))
                } else {
                    Err(Error::NotFound(format!("buffer {id}")))
                }
            }
        }
    }

    pub fn create_buffer(
        &self,
        size_bytes: usize,
        alloc_class: AllocClass,
        requested_node: Option<u32>,
    ) -> Result<BufferId> {
        let actual = requested_node.unwrap_or(0);
        self.create_buffer_placed(size_bytes, alloc_class, requested_node, actual)
    }

    /// Variant used by the placement layer, which decides the actual node.
    pub fn create_buffer_placed(
        &self,
        size_bytes: usize,
        alloc_class: AllocClass,
        requested_node: Option<u32>,
        actual_node: u32,
    ) -> Result<BufferId> {
        if size_bytes == 0 {
            return Err(Error::InvalidArgument("buffer size must be > 0".into()));
        }
        if alloc_class == AllocClass::Coherent && size_bytes > self.shared.cfg.coherent_ceiling {
            return Err(Error::InvalidArgument(format!(
                "coherent allocation of {size_bytes} bytes exceeds ceiling {}",
                self.shared.cfg.coherent_ceiling
            )));
        }
        let id = {
            let _g = LevelGuard::enter(&self.shared.cfg.validator, LockLevel::Buffer);
            let mut map = self.shared.buffers.lock();
            if map.len() >= self.shared.cfg.max_buffers {
                return Err(Error::ResourceExhausted(format!(
                    "registry full ({} buffers)",
                    map.len()
                )));
            }
            let id = self.shared.next_buffer_id.fetch_add(1, Ordering::Relaxed);
            map.insert(
                id,
                Arc::new(Buffer {
                    id,
                    inner: Mutex::new(BufferInner {
                        size_bytes,
                        alloc_class,
                        requested_node,
                        actual_node,
                        mapping_count: 0,
                        state: BufferState::Live,
                        backing: vec![0u8; size_bytes],
                        export: None,
                        live_tokens: HashSet::new(),
                    }),
                }),
            );
            id
        };
        self.shared.created.fetch_add(1, Ordering::Relaxed);
        self.emit(EventKind::BufferCreate, || EventPayload::Buffer {
            id,
            size_bytes,
        });
        Ok(id)
    }

    pub fn buffer_info(&self, id: BufferId) -> Result<BufferInfo> {
        let buf = self.lookup(id)?;
        let inner = buf.inner.lock();
        Ok(BufferInfo {
            id: buf.id,
            size_bytes: inner.size_bytes,
            alloc_class: inner.alloc_class,
            requested_node: inner.requested_node,
            actual_node: inner.actual_node,
            mapping_count: inner.mapping_count,
            state: inner.state,
            exported: inner.export.is_some(),
            active_attachments: inner
                .export
                .as_ref()
                .map(|e| e.state.lock().active_attachments)
                .unwrap_or(0),
        })
    }

    pub fn map_buffer(&self, id: BufferId) -> Result<MapToken> {
        let buf = self.lookup(id)?;
        let mut inner = buf.inner.lock();
        if inner.state != BufferState::Live {
            return Err(Error::StaleHandle(format!("buffer {id} is {:?}", inner.state)));
        }
        // The first map increments explicitly, identical to later maps.
        let token = self.shared.next_token.fetch_add(1, Ordering::Relaxed);
        inner.mapping_count += 1;
        inner.live_tokens.insert(token);
        self.shared.maps.fetch_add(1, Ordering::Relaxed);
        Ok(MapToken { token, buffer: id })
    }

    pub fn unmap_buffer(&self, token: MapToken) -> Result<()> {
        let buf = self.lookup(token.buffer)?;
        let mut inner = buf.inner.lock();
        if !inner.live_tokens.remove(&token.token) {
            return Err(Error::InvalidArgument(format!(
                "unknown mapping token {} for buffer {}",
                token.token, token.buffer
            )));
        }
        inner.mapping_count -= 1;
        self.shared.unmaps.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn destroy_buffer(&self, id: BufferId) -> Result<()> {
        let buf = match self.lookup(id) {
            Ok(b) => b,
            // A fully destroyed buffer is gone from the namespace.
            Err(Error::StaleHandle(_)) => return Err(Error::NotFound(format!("buffer {id}"))),
            Err(e) => return Err(e),
        };
        let (size_bytes, export) = {
            let mut inner = buf.inner.lock();
            match inner.state {
                BufferState::Live => {}
                BufferState::Destroying => {
                    return Err(Error::Busy(format!("buffer {id} is being destroyed")))
                }
                BufferState::Destroyed => {
                    return Err(Error::NotFound(format!("buffer {id}")))
                }
            }
            if inner.mapping_count > 0 {
                return Err(Error::Busy(format!(
                    "buffer {id} has {} active mappings",
                    inner.mapping_count
                )));
            }
            if let Some(exp) = &inner.export {
                let n = exp.state.lock().active_attachments;
                if n > 0 {
                    return Err(Error::Busy(format!(
                        "buffer {id} has {n} active attachments"
                    )));
                }
            }
            inner.state = BufferState::Destroying;
            (inner.size_bytes, inner.export.clone())
        };
        // Backing release happens outside the destroying window so a
        // concurrent destroy observes the transient state as busy.
        {
            let mut inner = buf.inner.lock();
            debug_assert_eq!(inner.state, BufferState::Destroying);
            inner.backing = Vec::new();
            inner.state = BufferState::Destroyed;
        }
        if let Some(exp) = export {
            exp.buffer_destroyed.store(true, Ordering::Release);
        }
        {
            let _g = LevelGuard::enter(&self.shared.cfg.validator, LockLevel::Buffer);
            self.shared.buffers.lock().remove(&id);
        }
        self.shared.destroyed.fetch_add(1, Ordering::Relaxed);
        self.emit(EventKind::BufferDestroy, || EventPayload::Buffer {
            id,
            size_bytes,
        });
        Ok(())
    }

    /// Exports a live buffer. One live export at a time; re-export is
    /// allowed after the previous export released.
    pub fn export_buffer(&self, id: BufferId) -> Result<ExportHandle> {
        let buf = self.lookup(id)?;
        let mut inner = buf.inner.lock();
        if inner.state != BufferState::Live {
            return Err(Error::StaleHandle(format!("buffer {id} is {:?}", inner.state)));
        }
        if let Some(exp) = &inner.export {
            if !exp.state.lock().released {
                return Err(Error::Busy(format!("buffer {id} already exported")));
            }
        }
        let shared = Arc::new(ExportShared {
            buffer_id: id,
            size_bytes: inner.size_bytes,
            state: Mutex::new(ExportState {
                active_attachments: 0,
                exporter_dropped: false,
                released: false,
            }),
            buffer_destroyed: AtomicBool::new(false),
            release_count: AtomicU64::new(0),
            next_attach_id: AtomicU64::new(1),
        });
        inner.export = Some(shared.clone());
        Ok(ExportHandle { shared })
    }

    /// Runs `f` over the buffer's backing bytes.
    pub fn with_backing<R>(&self, id: BufferId, f: impl FnOnce(&[u8]) -> R) -> Result<R> {
        let buf = self.lookup(id)?;
        let inner = buf.inner.lock();
        if inner.state != BufferState::Live {
            return Err(Error::StaleHandle(format!("buffer {id} is {:?}", inner.state)));
        }
        Ok(f(&inner.backing))
    }

    pub fn with_backing_mut<R>(&self, id: BufferId, f: impl FnOnce(&mut [u8]) -> R) -> Result<R> {
        let buf = self.lookup(id)?;
        let mut inner = buf.inner.lock();
        if inner.state != BufferState::Live {
            return Err(Error::StaleHandle(format!("buffer {id} is {:?}", inner.state)));
        }
        Ok(f(&mut inner.backing))
    }

    pub fn write_backing(&self, id: BufferId, offset: usize, data: &[u8]) -> Result<()> {
        self.with_backing_mut(id, |b| {
            if offset + data.len() > b.len() {
                return Err(Error::InvalidArgument(format!(
                    "write [{offset}, {}) exceeds buffer size {}",
                    offset + data.len(),
                    b.len()
                )));
            }
            b[offset..offset + data.len()].copy_from_slice(data);
            Ok(())
        })?
    }

    pub fn read_backing(&self, id: BufferId, offset: usize, len: usize) -> Result<Vec<u8>> {
        self.with_backing(id, |b| {
            if offset + len > b.len() {
                return Err(Error::InvalidArgument(format!(
                    "read [{offset}, {}) exceeds buffer size {}",
                    offset + len,
                    b.len()
                )));
            }
            Ok(b[offset..offset + len].to_vec())
        })?
    }

    // ---- revocable external regions -------------------------------------

    pub fn register_revocable_region(&self, size_bytes: usize) -> Result<RegionId> {
        if size_bytes == 0 {
            return Err(Error::InvalidArgument("region size must be > 0".into()));
        }
        let id = self.shared.next_region_id.fetch_add(1, Ordering::Relaxed);
        self.shared.regions.insert(
            id,
            Arc::new(RegionState {
                size_bytes,
                revoked: AtomicBool::new(false),
                cleanup_pending: AtomicBool::new(false),
                cleaned: AtomicBool::new(false),
            }),
        );
        self.shared
            .revocable_bytes
            .fetch_add(size_bytes, Ordering::Relaxed);
        Ok(id)
    }

    /// Revocation callback path: sets the flag and schedules cleanup.
    /// Performs no resource release and acquires no registry lock.
    pub fn revoke(&self, id: RegionId) -> Result<RevokeOutcome> {
        let region = self
            .shared
            .regions
            .get(&id)
            .map(|r| r.clone())
            .ok_or_else(|| Error::NotFound(format!("region {id}")))?;
        if region.revoked.swap(true, Ordering::AcqRel) {
            return Ok(RevokeOutcome::AlreadyRevoked);
        }
        region.cleanup_pending.store(true, Ordering::Release);
        Ok(RevokeOutcome::Revoked)
    }

    /// Releases every revoked region exactly once; returns how many were
    /// cleaned on this call.
    pub fn run_deferred_cleanup(&self) -> usize {
        let mut cleaned = 0;
        let pending: Vec<(RegionId, Arc<RegionState>)> = self
            .shared
            .regions
            .iter()
            .filter(|e| e.revoked.load(Ordering::Acquire))
            .map(|e| (*e.key(), e.value().clone()))
            .collect();
        for (id, region) in pending {
            if region
                .cleaned
                .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                region.cleanup_pending.store(false, Ordering::Release);
                self.shared
                    .revocable_bytes
                    .fetch_sub(region.size_bytes, Ordering::Relaxed);
                self.shared.regions.remove(&id);
                cleaned += 1;
            }
        }
        cleaned
    }

    pub fn region_info(&self, id: RegionId) -> Result<RegionInfo> {
        let region = self
            .shared
            .regions
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("region {id}")))?;
        Ok(RegionInfo {
            region_id: id,
            size_bytes: region.size_bytes,
            revoked: region.revoked.load(Ordering::Acquire),
            cleanup_pending: region.cleanup_pending.load(Ordering::Acquire),
        })
    }

    /// Bytes still accounted to registered (not yet cleaned) regions.
    pub fn revocable_bytes_outstanding(&self) -> usize {
        self.shared.revocable_bytes.load(Ordering::Relaxed)
    }

    // ---- inspection / shutdown ------------------------------------------

    pub fn live_buffer_count(&self) -> usize {
        let _g = LevelGuard::enter(&self.shared.cfg.validator, LockLevel::Buffer);
        self.shared.buffers.lock().len()
    }

    pub fn live_buffer_ids(&self) -> Vec<BufferId> {
        let _g = LevelGuard::enter(&self.shared.cfg.validator, LockLevel::Buffer);
        let mut ids: Vec<BufferId> = self.shared.buffers.lock().keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn buffers_created(&self) -> u64 {
        self.shared.created.load(Ordering::Relaxed)
    }

    pub fn buffers_destroyed(&self) -> u64 {
        self.shared.destroyed.load(Ordering::Relaxed)
    }

    pub fn validator(&self) -> Option<&Arc<LockOrderValidator>> {
        self.shared.cfg.validator.as_ref()
    }

    /// Composed-shutdown tail: destroys every destroyable buffer and emits
    /// the registry teardown event. Returns (destroyed, still_busy).
    pub fn destroy_all(&self) -> (usize, usize) {
        let ids = self.live_buffer_ids();
        let mut destroyed = 0;
        let mut busy = 0;
        for id in ids {
            match self.destroy_buffer(id) {
                Ok(()) => destroyed += 1,
                Err(Error::Busy(_)) => busy += 1,
                Err(_) => {}
            }
        }
        self.emit(EventKind::Teardown, || EventPayload::Teardown {
            phase: TeardownPhase::Registry,
        });
        (destroyed, busy)
    }
}
