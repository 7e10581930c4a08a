//! Simulated RDMA verbs engine.
//!
//! Resource chain PD -> CQs -> QPs -> MRs, allocated in order and
//! destroyed in reverse, with QP error-flush before destroy. Completions
//! are polled explicitly; nothing is delivered via callbacks. Transports:
//! loopback (synchronous, in the poster's context), an in-process frame
//! pair, and a TCP stream; both link transports run a progress thread and
//! satisfy the same completion contract. Per-QP delivery is reliable and
//! in order.

mod link;
pub mod wire;

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lock_order::{LockLevel, LockOrderValidator};
use crate::observe::{EventHub, EventKind, EventPayload, TeardownPhase};
use crate::registry::{BufferId, Registry};

use link::{LinkHalves, LinkTx, RecvOutcome};
use wire::{Frame, WireOp};

pub type CqId = u32;
pub type QpId = u32;
pub type MrId = u32;

/// Scatter-gather element referencing a registered MR via its lkey.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sge {
    pub addr: u64,
    pub length: u32,
    pub lkey: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpState {
    Reset,
    Init,
    Rtr,
    Rts,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcOpcode {
    Send,
    Recv,
    Write,
    WriteImmSend,
    WriteImmRecv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WcStatus {
    Ok,
    Flushed,
    RemoteProtection,
    ReceiverNotReady,
    RetryExceeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkCompletion {
    pub wr_seq: u64,
    pub opcode: WcOpcode,
    pub status: WcStatus,
    pub imm: Option<u32>,
    pub byte_len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MrInfo {
    pub mr_id: MrId,
    pub buffer_id: BufferId,
    pub base: u64,
    pub length: u64,
    pub lkey: u32,
    pub rkey: Option<u32>,
}

/// Peer-advertised landing region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemoteMr {
    pub base: u64,
    pub length: u64,
    pub rkey: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResourceTag {
    Pd(u32),
    Cq(CqId),
    Qp(QpId),
    Mr(MrId),
}

#[derive(Debug, Clone)]
pub enum LinkConfig {
    Loopback,
    Listen(String),
    Connect(String),
}

pub struct FabricConfig {
    pub link: LinkConfig,
    pub key_seed: u64,
    /// Receiver-not-ready retries before the error surfaces (0 = strict).
    pub retry_budget: u32,
    pub retry_interval: Duration,
    pub default_cq_depth: usize,
    pub validator: Option<Arc<LockOrderValidator>>,
    pub events: Option<Arc<EventHub>>,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            link: LinkConfig::Loopback,
            key_seed: 0xd3a9_17a1,
            retry_budget: 0,
            retry_interval: Duration::from_micros(200),
            default_cq_depth: 256,
            validator: None,
            events: None,
        }
    }
}

pub struct Cq {
    pub id: CqId,
    depth: usize,
    queue: Mutex<VecDeque<WorkCompletion>>,
    overflow: AtomicU64,
    destroyed: AtomicBool,
    delivered_after_destroy: AtomicU64,
}

impl Cq {
    fn new(id: CqId, depth: usize) -> Cq {
        Cq {
            id,
            depth,
            queue: Mutex::new(VecDeque::new()),
            overflow: AtomicU64::new(0),
            destroyed: AtomicBool::new(false),
            delivered_after_destroy: AtomicU64::new(0),
        }
    }
}

struct RecvSlot {
    wr_seq: u64,
    sges: Vec<Sge>,
}

struct PendingSend {
    wr_seq: u64,
    opcode: WcOpcode,
    byte_len: u32,
}

enum Peer {
    Unconnected,
    LoopbackTo(QpId),
    Link,
}

struct QpInner {
    state: QpState,
    posted_recvs: VecDeque<RecvSlot>,
    pending_sends: VecDeque<PendingSend>,
    next_wr_seq: u64,
}

struct Qp {
    send_cq: Arc<Cq>,
    recv_cq: Arc<Cq>,
    peer: Mutex<Peer>,
    inner: Mutex<QpInner>,
}

struct MrEntry {
    buffer_id: BufferId,
    base: u64,
    length: u64,
    lkey: u32,
    rkey: Option<u32>,
}

struct Resources {
    pd_id: u32,
    pd_alive: bool,
    cqs: HashMap<CqId, Arc<Cq>>,
    qps: HashMap<QpId, Arc<Qp>>,
    mrs: HashMap<MrId, Arc<MrEntry>>,
    lkey_index: HashMap<u32, MrId>,
    rkey_index: HashMap<u32, MrId>,
    used_keys: HashSet<u32>,
    key_rng: ChaCha8Rng,
    next_cq: CqId,
    next_qp: QpId,
    next_mr: MrId,
    next_addr: u64,
    link_qp: Option<QpId>,
    creation_log: Vec<ResourceTag>,
    destruction_log: Vec<ResourceTag>,
}

struct Shared {
    access: RwLock<()>,
    res: Mutex<Resources>,
    torn_down: AtomicBool,
    registry: Registry,
    validator: Option<Arc<LockOrderValidator>>,
    events: Option<Arc<EventHub>>,
    retry_budget: u32,
    retry_interval: Duration,
    default_send_cq: CqId,
    default_recv_cq: CqId,
    link_tx: Option<LinkTx>,
    tcp_for_shutdown: Option<std::net::TcpStream>,
    stop: AtomicBool,
    remote_mrs: Mutex<VecDeque<RemoteMr>>,
    remote_mrs_cv: Condvar,
    window_credits_in: AtomicU64,
    posts: AtomicU64,
    completions: AtomicU64,
    overflows: AtomicU64,
    rnr_events: AtomicU64,
    post_teardown_deliveries: AtomicU64,
}

/// Summary returned by teardown: every completion drained during quiesce
/// (completed or flushed) plus the observed destruction order.
#[derive(Debug, Default)]
pub struct TeardownReport {
    pub completions: Vec<WorkCompletion>,
    pub destruction_log: Vec<ResourceTag>,
}

/// One fabric endpoint. Many concurrent posters share it; teardown takes
/// exclusive access. Dropping the fabric tears it down.
pub struct Fabric {
    shared: Arc<Shared>,
    progress: Mutex<Option<std::thread::JoinHandle<()>>>,
}

struct AccessGuard<'a> {
    _lock: parking_lot::RwLockReadGuard<'a, ()>,
    validator: Option<&'a LockOrderValidator>,
}

impl Drop for AccessGuard<'_> {
    fn drop(&mut self) {
        if let Some(v) = self.validator {
            v.check_lock_release(LockLevel::Fabric);
        }
    }
}

impl Fabric {
    pub fn setup(registry: Registry, cfg: FabricConfig) -> Result<Fabric> {
        let halves = match &cfg.link {
            LinkConfig::Loopback => None,
            LinkConfig::Listen(addr) => Some(link::tcp_listen(addr.as_str())?),
            LinkConfig::Connect(addr) => Some(link::tcp_connect(addr.as_str())?),
        };
        Self::build(registry, cfg, halves)
    }

    /// Two endpoints joined by an in-process reliable pair.
    pub fn setup_pair(
        registry_a: Registry,
        registry_b: Registry,
        cfg_a: FabricConfig,
        cfg_b: FabricConfig,
    ) -> Result<(Fabric, Fabric)> {
        let (ha, hb) = link::pair();
        let a = Self::build(registry_a, cfg_a, Some(ha))?;
        let b = Self::build(registry_b, cfg_b, Some(hb))?;
        Ok((a, b))
    }

    fn build(registry: Registry, cfg: FabricConfig, halves: Option<LinkHalves>) -> Result<Fabric> {
        if cfg.default_cq_depth == 0 {
            return Err(Error::InvalidArgument("cq depth must be > 0".into()));
        }
        let mut res = Resources {
            pd_id: 1,
            pd_alive: true,
            cqs: HashMap::new(),
            qps: HashMap::new(),
            mrs: HashMap::new(),
            lkey_index: HashMap::new(),
            rkey_index: HashMap::new(),
            used_keys: HashSet::new(),
            key_rng: ChaCha8Rng::seed_from_u64(cfg.key_seed),
            next_cq: 1,
            next_qp: 1,
            next_mr: 1,
            next_addr: 0x1_0000_0000,
            link_qp: None,
            creation_log: vec![ResourceTag::Pd(1)],
            destruction_log: Vec::new(),
        };
        let send_cq = res.next_cq;
        res.next_cq += 1;
        res.cqs
            .insert(send_cq, Arc::new(Cq::new(send_cq, cfg.default_cq_depth)));
        res.creation_log.push(ResourceTag::Cq(send_cq));
        let recv_cq = res.next_cq;
        res.next_cq += 1;
        res.cqs
            .insert(recv_cq, Arc::new(Cq::new(recv_cq, cfg.default_cq_depth)));
        res.creation_log.push(ResourceTag::Cq(recv_cq));

        let (link_tx, rx, tcp_for_shutdown) = match halves {
            Some(h) => (Some(LinkTx::new(h.tx)), Some(h.rx), h.tcp_for_shutdown),
            None => (None, None, None),
        };

        let shared = Arc::new(Shared {
            access: RwLock::new(()),
            res: Mutex::new(res),
            torn_down: AtomicBool::new(false),
            registry,
            validator: cfg.validator,
            events: cfg.events,
            retry_budget: cfg.retry_budget,
            retry_interval: cfg.retry_interval,
            default_send_cq: send_cq,
            default_recv_cq: recv_cq,
            link_tx,
            tcp_for_shutdown,
            stop: AtomicBool::new(false),
            remote_mrs: Mutex::new(VecDeque::new()),
            remote_mrs_cv: Condvar::new(),
            window_credits_in: AtomicU64::new(0),
            posts: AtomicU64::new(0),
            completions: AtomicU64::new(0),
            overflows: AtomicU64::new(0),
            rnr_events: AtomicU64::new(0),
            post_teardown_deliveries: AtomicU64::new(0),
        });

        let progress = match rx {
            Some(mut rx) => {
                let weak = Arc::downgrade(&shared);
                Some(
                    std::thread::Builder::new()
                        .name("dmaplane-fabric".into())
                        .spawn(move || loop {
                            let Some(shared) = weak.upgrade() else { break };
                            if shared.stop.load(Ordering::Acquire) {
                                break;
                            }
                            match rx.recv(&shared.stop) {
                                RecvOutcome::Frame(frame) => shared.handle_frame(frame),
                                RecvOutcome::TimedOut => {}
                                RecvOutcome::Closed => break,
                            }
                        })
                        .map_err(|e| Error::ResourceExhausted(e.to_string()))?,
                )
            }
            None => None,
        };

        Ok(Fabric {
            shared,
            progress: Mutex::new(progress),
        })
    }

    fn access(&self) -> Result<AccessGuard<'_>> {
        if self.shared.torn_down.load(Ordering::Acquire) {
            return Err(Error::StaleHandle("fabric torn down".into()));
        }
        let validator = self.shared.validator.as_deref();
        if let Some(v) = validator {
            let _ = v.check_lock_acquire(LockLevel::Fabric);
        }
        let lock = self.shared.access.read();
        if self.shared.torn_down.load(Ordering::Acquire) {
            if let Some(v) = validator {
                v.check_lock_release(LockLevel::Fabric);
            }
            return Err(Error::StaleHandle("fabric torn down".into()));
        }
        Ok(AccessGuard {
            _lock: lock,
            validator,
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.shared.registry
    }

    pub fn send_cq(&self) -> CqId {
        self.shared.default_send_cq
    }

    pub fn recv_cq(&self) -> CqId {
        self.shared.default_recv_cq
    }

    pub fn create_cq(&self, depth: usize) -> Result<CqId> {
        let _g = self.access()?;
        if depth == 0 {
            return Err(Error::InvalidArgument("cq depth must be > 0".into()));
        }
        let mut res = self.shared.res.lock();
        let id = res.next_cq;
        res.next_cq += 1;
        res.cqs.insert(id, Arc::new(Cq::new(id, depth)));
        res.creation_log.push(ResourceTag::Cq(id));
        Ok(id)
    }

    pub fn cq_depth(&self, cq: CqId) -> Result<usize> {
        Ok(self.cq_arc(cq)?.depth)
    }

    pub fn cq_overflow_count(&self, cq: CqId) -> Result<u64> {
        Ok(self.cq_arc(cq)?.overflow.load(Ordering::Relaxed))
    }

    fn cq_arc(&self, cq: CqId) -> Result<Arc<Cq>> {
        self.shared
            .res
            .lock()
            .cqs
            .get(&cq)
            .cloned()
            .ok_or_else(|| Error::StaleHandle(format!("cq {cq}")))
    }

    fn qp_arc(&self, qp: QpId) -> Result<Arc<Qp>> {
        self.shared
            .res
            .lock()
            .qps
            .get(&qp)
            .cloned()
            .ok_or_else(|| Error::StaleHandle(format!("qp {qp}")))
    }

    pub fn create_qp(&self, send_cq: CqId, recv_cq: CqId) -> Result<QpId> {
        let _g = self.access()?;
        let mut res = self.shared.res.lock();
        let s = res
            .cqs
            .get(&send_cq)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("cq {send_cq}")))?;
        let r = res
            .cqs
            .get(&recv_cq)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("cq {recv_cq}")))?;
        let id = res.next_qp;
        res.next_qp += 1;
        res.qps.insert(
            id,
            Arc::new(Qp {
                send_cq: s,
                recv_cq: r,
                peer: Mutex::new(Peer::Unconnected),
                inner: Mutex::new(QpInner {
                    state: QpState::Reset,
                    posted_recvs: VecDeque::new(),
                    pending_sends: VecDeque::new(),
                    next_wr_seq: 1,
                }),
            }),
        );
        res.creation_log.push(ResourceTag::Qp(id));
        Ok(id)
    }

    /// Legal transitions: RESET->INIT->RTR->RTS plus any->ERROR. The
    /// ERROR transition flushes every pending WR to its CQ.
    pub fn modify_qp(&self, qp: QpId, target: QpState) -> Result<()> {
        let _g = self.access()?;
        let qp_arc = self.qp_arc(qp)?;
        let flushed = {
            let mut inner = qp_arc.inner.lock();
            let legal = matches!(
                (inner.state, target),
                (QpState::Reset, QpState::Init)
                    | (QpState::Init, QpState::Rtr)
                    | (QpState::Rtr, QpState::Rts)
                    | (_, QpState::Error)
            );
            if !legal {
                return Err(Error::InvalidState(format!(
                    "qp {qp}: {:?} -> {target:?}",
                    inner.state
                )));
            }
            inner.state = target;
            if target == QpState::Error {
                flush_qp(&qp_arc, &mut inner)
            } else {
                Vec::new()
            }
        };
        for (cq, wc) in flushed {
            self.shared.cq_push(&cq, wc);
        }
        if target == QpState::Rtr && self.shared.link_tx.is_some() {
            let mut res = self.shared.res.lock();
            if res.link_qp.is_none() {
                res.link_qp = Some(qp);
                *qp_arc.peer.lock() = Peer::Link;
            }
        }
        Ok(())
    }

    /// Connects two QPs of this (loopback) fabric to each other.
    pub fn connect_loopback(&self, a: QpId, b: QpId) -> Result<()> {
        let _g = self.access()?;
        let qa = self.qp_arc(a)?;
        let qb = self.qp_arc(b)?;
        *qa.peer.lock() = Peer::LoopbackTo(b);
        *qb.peer.lock() = Peer::LoopbackTo(a);
        Ok(())
    }

    /// Registers a live buffer. `rkey` present iff remote access was
    /// requested; keys are nonzero and unique per fabric.
    pub fn register_mr(&self, buffer_id: BufferId, remote_access: bool) -> Result<MrInfo> {
        let _g = self.access()?;
        let info = match self.shared.registry.buffer_info(buffer_id) {
            Ok(i) => i,
            Err(Error::StaleHandle(m)) => return Err(Error::NotFound(m)),
            Err(e) => return Err(e),
        };
        let mut res = self.shared.res.lock();
        let lkey = res.alloc_key();
        let rkey = if remote_access {
            Some(res.alloc_key())
        } else {
            None
        };
        let base = res.next_addr;
        res.next_addr += (info.size_bytes as u64 + 0xFFF) & !0xFFF;
        res.next_addr += 0x1000; // guard gap
        let id = res.next_mr;
        res.next_mr += 1;
        let entry = Arc::new(MrEntry {
            buffer_id,
            base,
            length: info.size_bytes as u64,
            lkey,
            rkey,
        });
        res.lkey_index.insert(lkey, id);
        if let Some(rk) = rkey {
            res.rkey_index.insert(rk, id);
        }
        res.mrs.insert(id, entry);
        res.creation_log.push(ResourceTag::Mr(id));
        Ok(MrInfo {
            mr_id: id,
            buffer_id,
            base,
            length: info.size_bytes as u64,
            lkey,
            rkey,
        })
    }

    pub fn deregister_mr(&self, mr: MrId) -> Result<()> {
        let _g = self.access()?;
        let mut res = self.shared.res.lock();
        let entry = res
            .mrs
            .remove(&mr)
            .ok_or_else(|| Error::NotFound(format!("mr {mr}")))?;
        res.lkey_index.remove(&entry.lkey);
        if let Some(rk) = entry.rkey {
            res.rkey_index.remove(&rk);
        }
        Ok(())
    }

    /// Sends the MR's (base, length, rkey) to the peer as a control frame.
    /// On loopback the advertisement loops back to this context.
    pub fn advertise_mr(&self, mr: MrId) -> Result<()> {
        let _g = self.access()?;
        let entry = self
            .shared
            .res
            .lock()
            .mrs
            .get(&mr)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("mr {mr}")))?;
        let rkey = entry.rkey.ok_or_else(|| {
            Error::InvalidArgument(format!("mr {mr} has no remote access key"))
        })?;
        let frame = Frame::ctrl_mr_advert(entry.base, entry.length, rkey);
        match &self.shared.link_tx {
            Some(tx) => tx.send(&frame)?,
            None => self.shared.enqueue_remote_mr(RemoteMr {
                base: entry.base,
                length: entry.length,
                rkey,
            }),
        }
        Ok(())
    }

    pub fn await_remote_mr(&self, timeout: Duration) -> Result<RemoteMr> {
        let deadline = std::time::Instant::now() + timeout;
        let mut q = self.shared.remote_mrs.lock();
        loop {
            if let Some(mr) = q.pop_front() {
                return Ok(mr);
            }
            if self.shared.torn_down.load(Ordering::Acquire) {
                return Err(Error::StaleHandle("fabric torn down".into()));
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return Err(Error::Unreachable("no MR advertisement received".into()));
            }
            self.shared
                .remote_mrs_cv
                .wait_for(&mut q, deadline - now);
        }
    }

    pub fn post_recv(&self, qp: QpId, sges: &[Sge]) -> Result<u64> {
        let _g = self.access()?;
        let qp_arc = self.qp_arc(qp)?;
        if !sges.is_empty() {
            self.shared.resolve_local(sges)?;
        }
        let mut inner = qp_arc.inner.lock();
        if !matches!(inner.state, QpState::Init | QpState::Rtr | QpState::Rts) {
            return Err(Error::InvalidState(format!(
                "qp {qp} in {:?} cannot post recv",
                inner.state
            )));
        }
        let wr_seq = inner.next_wr_seq;
        inner.next_wr_seq += 1;
        inner.posted_recvs.push_back(RecvSlot {
            wr_seq,
            sges: sges.to_vec(),
        });
        Ok(wr_seq)
    }

    pub fn post_send(&self, qp: QpId, sges: &[Sge]) -> Result<u64> {
        let g = self.access()?;
        let payload = self.shared.read_sges(sges)?;
        self.post_op(g, qp, WcOpcode::Send, payload, 0, 0, None)
    }

    pub fn rdma_write(&self, qp: QpId, local: Sge, remote_addr: u64, rkey: u32) -> Result<u64> {
        let g = self.access()?;
        let payload = self.shared.read_sges(std::slice::from_ref(&local))?;
        self.post_op(g, qp, WcOpcode::Write, payload, remote_addr, rkey, None)
    }

    /// `local == None` posts a zero-length write with immediate.
    pub fn rdma_write_imm(
        &self,
        qp: QpId,
        local: Option<Sge>,
        remote_addr: u64,
        rkey: u32,
        imm: u32,
    ) -> Result<u64> {
        let g = self.access()?;
        let payload = match local {
            Some(sge) => self.shared.read_sges(std::slice::from_ref(&sge))?,
            None => Vec::new(),
        };
        self.post_op(
            g,
            qp,
            WcOpcode::WriteImmSend,
            payload,
            remote_addr,
            rkey,
            Some(imm),
        )
    }

    fn post_op(
        &self,
        _g: AccessGuard<'_>,
        qp: QpId,
        opcode: WcOpcode,
        payload: Vec<u8>,
        remote_addr: u64,
        rkey: u32,
        imm: Option<u32>,
    ) -> Result<u64> {
        let qp_arc = self.qp_arc(qp)?;
        let byte_len = payload.len() as u32;
        let mut payload = Some(payload);
        let wr_seq;
        enum Route {
            Pending,
            Loopback(QpId),
            Link,
        }
        let route = {
            let mut inner = qp_arc.inner.lock();
            if inner.state != QpState::Rts {
                return Err(Error::InvalidState(format!(
                    "qp {qp} in {:?} cannot post",
                    inner.state
                )));
            }
            wr_seq = inner.next_wr_seq;
            inner.next_wr_seq += 1;
            match &*qp_arc.peer.lock() {
                Peer::Unconnected => {
                    inner.pending_sends.push_back(PendingSend {
                        wr_seq,
                        opcode,
                        byte_len,
                    });
                    Route::Pending
                }
                Peer::LoopbackTo(peer) => Route::Loopback(*peer),
                Peer::Link => {
                    // Frame transmission and pending-queue order must agree
                    // so in-order acks match the right WR.
                    inner.pending_sends.push_back(PendingSend {
                        wr_seq,
                        opcode,
                        byte_len,
                    });
                    let wire_op = match opcode {
                        WcOpcode::Send => WireOp::Send,
                        WcOpcode::Write => WireOp::Write,
                        WcOpcode::WriteImmSend => WireOp::WriteImm,
                        _ => unreachable!(),
                    };
                    let frame = Frame {
                        opcode: wire_op,
                        flags: 0,
                        remote_addr,
                        rkey,
                        imm: imm.unwrap_or(0),
                        payload: payload.take().expect("payload consumed once"),
                    };
                    self.shared
                        .link_tx
                        .as_ref()
                        .expect("link peer without link")
                        .send(&frame)?;
                    Route::Link
                }
            }
        };
        self.shared.posts.fetch_add(1, Ordering::Relaxed);
        self.shared.emit(EventKind::RdmaPost, || EventPayload::Rdma {
            wr_seq,
            byte_len,
        });
        if let Route::Loopback(peer_id) = route {
            let peer = self.qp_arc(peer_id)?;
            let payload = payload.take().expect("payload available on loopback");
            let status = match opcode {
                WcOpcode::Write => self.shared.apply_write(&payload, remote_addr, rkey),
                WcOpcode::WriteImmSend => self.shared.apply_write_imm(
                    &peer,
                    &payload,
                    remote_addr,
                    rkey,
                    imm.unwrap_or(0),
                ),
                WcOpcode::Send => self.shared.apply_send(&peer, &payload),
                _ => unreachable!(),
            };
            if status == WcStatus::ReceiverNotReady {
                self.shared.rnr_events.fetch_add(1, Ordering::Relaxed);
            }
            self.shared.cq_push(
                &qp_arc.send_cq,
                WorkCompletion {
                    wr_seq,
                    opcode,
                    status,
                    imm: None,
                    byte_len,
                },
            );
        }
        Ok(wr_seq)
    }

    /// Dequeues up to `max` completions in arrival order; never blocks.
    pub fn poll_cq(&self, cq: CqId, max: usize) -> Result<Vec<WorkCompletion>> {
        let cq = self.cq_arc(cq)?;
        if cq.destroyed.load(Ordering::Acquire) {
            return Err(Error::StaleHandle(format!("cq {} destroyed", cq.id)));
        }
        let mut q = cq.queue.lock();
        let n = max.min(q.len());
        Ok(q.drain(..n).collect())
    }

    /// Receiver-side: return `n` receive-window credits to the sender.
    pub fn return_window_credits(&self, n: u32) -> Result<()> {
        let _g = self.access()?;
        match &self.shared.link_tx {
            Some(tx) => tx.send(&Frame::ctrl_credit(n)),
            None => {
                self.shared
                    .window_credits_in
                    .fetch_add(n as u64, Ordering::Release);
                Ok(())
            }
        }
    }

    /// Sender-side: drain credits returned by the peer since the last call.
    pub fn take_window_credits(&self) -> u64 {
        self.shared.window_credits_in.swap(0, Ordering::AcqRel)
    }

    /// Test hook: attempt PD destruction while children are alive.
    pub fn force_destroy_pd(&self) -> Result<()> {
        let _g = self.access()?;
        let mut res = self.shared.res.lock();
        if !res.qps.is_empty() || !res.cqs.is_empty() || !res.mrs.is_empty() {
            return Err(Error::ChildAlive(format!(
                "pd {} has {} qps, {} cqs, {} mrs",
                res.pd_id,
                res.qps.len(),
                res.cqs.len(),
                res.mrs.len()
            )));
        }
        res.pd_alive = false;
        Ok(())
    }

    /// Quiesces (exclusive access), flushes QPs via ERROR, drains all CQs
    /// into the report, then destroys QPs, CQs, MRs, and the PD — each
    /// class in reverse creation order. Idempotent.
    pub fn teardown(&self) -> TeardownReport {
        if self.shared.torn_down.swap(true, Ordering::AcqRel) {
            return TeardownReport::default();
        }
        // Stop the progress thread before taking exclusive access; it
        // takes shared access per frame.
        self.shared.stop.store(true, Ordering::Release);
        if let Some(tcp) = &self.shared.tcp_for_shutdown {
            link::shutdown_tcp(tcp);
        }
        if let Some(handle) = self.progress.lock().take() {
            let _ = handle.join();
        }
        if let Some(v) = self.shared.validator.as_deref() {
            let _ = v.check_lock_acquire(LockLevel::Fabric);
        }
        let report = {
            let _excl = self.shared.access.write();
            let mut res = self.shared.res.lock();
            let mut report = TeardownReport::default();
            // Flush every QP to ERROR first so pending WRs complete.
            let mut qp_ids: Vec<QpId> = res.qps.keys().copied().collect();
            qp_ids.sort_unstable();
            for id in &qp_ids {
                let qp = res.qps[id].clone();
                let flushed = {
                    let mut inner = qp.inner.lock();
                    inner.state = QpState::Error;
                    flush_qp(&qp, &mut inner)
                };
                for (cq, wc) in flushed {
                    self.shared.cq_push(&cq, wc);
                }
            }
            // Drain all CQs so every completion is observable in the report.
            let mut cq_ids: Vec<CqId> = res.cqs.keys().copied().collect();
            cq_ids.sort_unstable();
            for id in &cq_ids {
                let cq = res.cqs[id].clone();
                report.completions.extend(cq.queue.lock().drain(..));
            }
            // Destroy in reverse creation order per class: QPs, CQs, MRs, PD.
            for tag in res.creation_log.clone().iter().rev() {
                if let ResourceTag::Qp(id) = tag {
                    if res.qps.remove(id).is_some() {
                        res.destruction_log.push(*tag);
                    }
                }
            }
            for tag in res.creation_log.clone().iter().rev() {
                if let ResourceTag::Cq(id) = tag {
                    if let Some(cq) = res.cqs.remove(id) {
                        cq.destroyed.store(true, Ordering::Release);
                        res.destruction_log.push(*tag);
                    }
                }
            }
            for tag in res.creation_log.clone().iter().rev() {
                if let ResourceTag::Mr(id) = tag {
                    if let Some(mr) = res.mrs.remove(id) {
                        res.lkey_index.remove(&mr.lkey);
                        if let Some(rk) = mr.rkey {
                            res.rkey_index.remove(&rk);
                        }
                        res.destruction_log.push(*tag);
                    }
                }
            }
            res.pd_alive = false;
            let pd_tag = ResourceTag::Pd(res.pd_id);
            res.destruction_log.push(pd_tag);
            report.destruction_log = res.destruction_log.clone();
            report
        };
        if let Some(v) = self.shared.validator.as_deref() {
            v.check_lock_release(LockLevel::Fabric);
        }
        self.shared.emit(EventKind::Teardown, || EventPayload::Teardown {
            phase: TeardownPhase::Fabric,
        });
        report
    }

    pub fn is_torn_down(&self) -> bool {
        self.shared.torn_down.load(Ordering::Acquire)
    }

    pub fn creation_log(&self) -> Vec<ResourceTag> {
        self.shared.res.lock().creation_log.clone()
    }

    pub fn destruction_log(&self) -> Vec<ResourceTag> {
        self.shared.res.lock().destruction_log.clone()
    }

    pub fn posts(&self) -> u64 {
        self.shared.posts.load(Ordering::Relaxed)
    }

    pub fn completions(&self) -> u64 {
        self.shared.completions.load(Ordering::Relaxed)
    }

    pub fn total_overflows(&self) -> u64 {
        self.shared.overflows.load(Ordering::Relaxed)
    }

    pub fn rnr_events(&self) -> u64 {
        self.shared.rnr_events.load(Ordering::Relaxed)
    }

    /// Completions that arrived after teardown returned (must stay 0).
    pub fn post_teardown_deliveries(&self) -> u64 {
        self.shared.post_teardown_deliveries.load(Ordering::Relaxed)
    }
}

impl Drop for Fabric {
    fn drop(&mut self) {
        self.teardown();
    }
}

fn flush_qp(qp: &Qp, inner: &mut QpInner) -> Vec<(Arc<Cq>, WorkCompletion)> {
    let mut out = Vec::new();
    for p in inner.pending_sends.drain(..) {
        out.push((
            qp.send_cq.clone(),
            WorkCompletion {
                wr_seq: p.wr_seq,
                opcode: p.opcode,
                status: WcStatus::Flushed,
                imm: None,
                byte_len: p.byte_len,
            },
        ));
    }
    for r in inner.posted_recvs.drain(..) {
        out.push((
            qp.recv_cq.clone(),
            WorkCompletion {
                wr_seq: r.wr_seq,
                opcode: WcOpcode::Recv,
                status: WcStatus::Flushed,
                imm: None,
                byte_len: 0,
            },
        ));
    }
    out
}

impl Shared {
    fn emit(&self, kind: EventKind, payload: impl FnOnce() -> EventPayload) {
        if let Some(hub) = &self.events {
            hub.emit(kind, payload);
        }
    }

    fn enqueue_remote_mr(&self, mr: RemoteMr) {
        self.remote_mrs.lock().push_back(mr);
        self.remote_mrs_cv.notify_all();
    }

    /// Delivery point for every completion. Applies the CQ depth bound:
    /// an arrival at a full queue increments overflow and is dropped.
    fn cq_push(&self, cq: &Cq, wc: WorkCompletion) {
        if cq.destroyed.load(Ordering::Acquire) {
            cq.delivered_after_destroy.fetch_add(1, Ordering::Relaxed);
            self.post_teardown_deliveries.fetch_add(1, Ordering::Relaxed);
            return;
        }
        {
            let mut q = cq.queue.lock();
            if q.len() >= cq.depth {
                cq.overflow.fetch_add(1, Ordering::Relaxed);
                self.overflows.fetch_add(1, Ordering::Relaxed);
                return;
            }
            q.push_back(wc);
        }
        self.completions.fetch_add(1, Ordering::Relaxed);
        self.emit(EventKind::RdmaCompletion, || EventPayload::Rdma {
            wr_seq: wc.wr_seq,
            byte_len: wc.byte_len,
        });
    }

    /// Resolves SGEs against registered MRs via lkey; any miss or
    /// out-of-range access is an immediate local protection fault.
    fn resolve_local(&self, sges: &[Sge]) -> Result<Vec<(BufferId, usize, usize)>> {
        let res = self.res.lock();
        let mut out = Vec::with_capacity(sges.len());
        for sge in sges {
            let mr_id = res
                .lkey_index
                .get(&sge.lkey)
                .ok_or_else(|| Error::LocalProtection(format!("unknown lkey {:#x}", sge.lkey)))?;
            let mr = &res.mrs[mr_id];
            let end = sge.addr.checked_add(sge.length as u64).ok_or_else(|| {
                Error::LocalProtection("sge range overflows address space".into())
            })?;
            if sge.addr < mr.base || end > mr.base + mr.length {
                return Err(Error::LocalProtection(format!(
                    "sge [{:#x},{end:#x}) outside mr [{:#x},{:#x})",
                    sge.addr,
                    mr.base,
                    mr.base + mr.length
                )));
            }
            out.push((
                mr.buffer_id,
                (sge.addr - mr.base) as usize,
                sge.length as usize,
            ));
        }
        Ok(out)
    }

    fn read_sges(&self, sges: &[Sge]) -> Result<Vec<u8>> {
        let spans = self.resolve_local(sges)?;
        let mut out = Vec::with_capacity(spans.iter().map(|s| s.2).sum());
        for (buf, off, len) in spans {
            out.extend(self.registry.read_backing(buf, off, len)?);
        }
        Ok(out)
    }

    fn resolve_remote(&self, addr: u64, len: usize, rkey: u32) -> Option<(BufferId, usize)> {
        let res = self.res.lock();
        let mr_id = res.rkey_index.get(&rkey)?;
        let mr = &res.mrs[mr_id];
        let end = addr.checked_add(len as u64)?;
        if addr < mr.base || end > mr.base + mr.length {
            return None;
        }
        Some((mr.buffer_id, (addr - mr.base) as usize))
    }

    fn apply_write(&self, payload: &[u8], remote_addr: u64, rkey: u32) -> WcStatus {
        match self.resolve_remote(remote_addr, payload.len(), rkey) {
            Some((buf, off)) => {
                if self.registry.write_backing(buf, off, payload).is_ok() {
                    WcStatus::Ok
                } else {
                    WcStatus::RemoteProtection
                }
            }
            None => WcStatus::RemoteProtection,
        }
    }

    /// Pops a pre-posted receive slot, retrying per the budget.
    fn take_recv_slot(&self, qp: &Qp) -> Option<RecvSlot> {
        let mut attempts = 0;
        loop {
            if let Some(slot) = qp.inner.lock().posted_recvs.pop_front() {
                return Some(slot);
            }
            if attempts >= self.retry_budget {
                return None;
            }
            attempts += 1;
            std::thread::sleep(self.retry_interval);
        }
    }

    fn apply_write_imm(
        &self,
        peer: &Qp,
        payload: &[u8],
        remote_addr: u64,
        rkey: u32,
        imm: u32,
    ) -> WcStatus {
        let Some((buf, off)) = self.resolve_remote(remote_addr, payload.len(), rkey) else {
            return WcStatus::RemoteProtection;
        };
        let Some(slot) = self.take_recv_slot(peer) else {
            return WcStatus::ReceiverNotReady;
        };
        if !payload.is_empty() && self.registry.write_backing(buf, off, payload).is_err() {
            return WcStatus::RemoteProtection;
        }
        self.cq_push(
            &peer.recv_cq,
            WorkCompletion {
                wr_seq: slot.wr_seq,
                opcode: WcOpcode::WriteImmRecv,
                status: WcStatus::Ok,
                imm: Some(imm),
                byte_len: payload.len() as u32,
            },
        );
        WcStatus::Ok
    }

    fn apply_send(&self, peer: &Qp, payload: &[u8]) -> WcStatus {
        let Some(slot) = self.take_recv_slot(peer) else {
            return WcStatus::RetryExceeded;
        };
        let spans = match self.resolve_local(&slot.sges) {
            Ok(s) => s,
            Err(_) => return WcStatus::RemoteProtection,
        };
        let capacity: usize = spans.iter().map(|s| s.2).sum();
        if payload.len() > capacity {
            return WcStatus::RemoteProtection;
        }
        let mut cursor = 0;
        for (buf, off, len) in spans {
            if cursor >= payload.len() {
                break;
            }
            let take = len.min(payload.len() - cursor);
            if self
                .registry
                .write_backing(buf, off, &payload[cursor..cursor + take])
                .is_err()
            {
                return WcStatus::RemoteProtection;
            }
            cursor += take;
        }
        self.cq_push(
            &peer.recv_cq,
            WorkCompletion {
                wr_seq: slot.wr_seq,
                opcode: WcOpcode::Recv,
                status: WcStatus::Ok,
                imm: None,
                byte_len: payload.len() as u32,
            },
        );
        WcStatus::Ok
    }

    fn bound_qp(&self) -> Option<Arc<Qp>> {
        let res = self.res.lock();
        res.link_qp.and_then(|id| res.qps.get(&id).cloned())
    }

    fn send_ack(&self, status: u8) {
        if let Some(tx) = &self.link_tx {
            let _ = tx.send(&Frame::ctrl_ack(status));
        }
    }

    /// Progress-thread entry point for one incoming frame.
    fn handle_frame(self: &Arc<Shared>, frame: Frame) {
        if self.torn_down.load(Ordering::Acquire) {
            return;
        }
        if let Some(v) = self.validator.as_deref() {
            let _ = v.check_lock_acquire(LockLevel::Fabric);
        }
        let _shared_access = self.access.read();
        match frame.opcode {
            WireOp::Ctrl => match frame.flags {
                wire::CTRL_MR_ADVERT => {
                    if let Ok((base, length, rkey)) = frame.parse_mr_advert() {
                        self.enqueue_remote_mr(RemoteMr { base, length, rkey });
                    }
                }
                wire::CTRL_CREDIT => {
                    if let Ok(n) = frame.parse_credit() {
                        self.window_credits_in
                            .fetch_add(n as u64, Ordering::Release);
                    }
                }
                wire::CTRL_ACK => {
                    if let (Ok(status), Some(qp)) = (frame.parse_ack(), self.bound_qp()) {
                        let pending = qp.inner.lock().pending_sends.pop_front();
                        if let Some(p) = pending {
                            let status = match status {
                                wire::ACK_OK => WcStatus::Ok,
                                wire::ACK_REMOTE_PROTECTION => WcStatus::RemoteProtection,
                                wire::ACK_RECEIVER_NOT_READY => WcStatus::ReceiverNotReady,
                                _ => WcStatus::RetryExceeded,
                            };
                            if status == WcStatus::ReceiverNotReady {
                                self.rnr_events.fetch_add(1, Ordering::Relaxed);
                            }
                            self.cq_push(
                                &qp.send_cq,
                                WorkCompletion {
                                    wr_seq: p.wr_seq,
                                    opcode: p.opcode,
                                    status,
                                    imm: None,
                                    byte_len: p.byte_len,
                                },
                            );
                        }
                    }
                }
                _ => {}
            },
            WireOp::Write => {
                let status = self.apply_write(&frame.payload, frame.remote_addr, frame.rkey);
                self.send_ack(wc_status_to_ack(status));
            }
            WireOp::WriteImm => {
                let status = match self.bound_qp() {
                    Some(qp) => self.apply_write_imm(
                        &qp,
                        &frame.payload,
                        frame.remote_addr,
                        frame.rkey,
                        frame.imm,
                    ),
                    None => WcStatus::ReceiverNotReady,
                };
                self.send_ack(wc_status_to_ack(status));
            }
            WireOp::Send => {
                let status = match self.bound_qp() {
                    Some(qp) => self.apply_send(&qp, &frame.payload),
                    None => WcStatus::RetryExceeded,
                };
                self.send_ack(wc_status_to_ack(status));
            }
        }
        if let Some(v) = self.validator.as_deref() {
            v.check_lock_release(LockLevel::Fabric);
        }
    }
}

fn wc_status_to_ack(status: WcStatus) -> u8 {
    match status {
        WcStatus::Ok => wire::ACK_OK,
        WcStatus::RemoteProtection => wire::ACK_REMOTE_PROTECTION,
        WcStatus::ReceiverNotReady => wire::ACK_RECEIVER_NOT_READY,
        WcStatus::RetryExceeded | WcStatus::Flushed => wire::ACK_RETRY_EXCEEDED,
    }
}

impl Resources {
    /// Nonzero, unique per fabric, from the seeded generator.
    fn alloc_key(&mut self) -> u32 {
        loop {
            let k: u32 = self.key_rng.gen();
            if k != 0 && self.used_keys.insert(k) {
                return k;
            }
        }
    }
}
