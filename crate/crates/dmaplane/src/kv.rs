//! Chunked KV-cache transfer over the fabric.
//!
//! Pipeline: per-layer fragments are consolidated into one contiguous
//! staging buffer with equal-size layers; the stage is cut into
//! fixed-size chunks, each pushed as a WRITE WITH IMMEDIATE whose 32-bit
//! tag is `(layer << 16) | chunk`; a zero-length sentinel write with
//! immediate `0xFFFF_FFFF` marks end-of-transfer and is posted only after
//! every data completion has been polled. The receiver tracks arrivals in
//! a bitmap, validates completeness at the sentinel, and exposes the
//! landing zone as per-layer views.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::fabric::{CqId, Fabric, MrInfo, QpId, RemoteMr, Sge, WcStatus};
use crate::flow::{CreditGauge, ReceiveWindow, SenderWindow};
use crate::registry::{BufferId, Registry};

/// End-of-transfer immediate. Layer 0xFFFF is reserved to keep the
/// sentinel unambiguous, so `layer_count < 0xFFFF`.
pub const SENTINEL: u32 = 0xFFFF_FFFF;

pub const DEFAULT_CHUNK_SIZE: usize = 64 << 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Chunk { layer: u16, chunk: u16 },
    Sentinel,
}

pub fn encode_tag(layer: u16, chunk: u16) -> Result<u32> {
    if layer == 0xFFFF {
        return Err(Error::InvalidArgument(
            "layer 0xFFFF is reserved for the sentinel".into(),
        ));
    }
    Ok(((layer as u32) << 16) | chunk as u32)
}

pub fn decode_tag(imm: u32) -> Tag {
    if imm == SENTINEL {
        Tag::Sentinel
    } else {
        Tag::Chunk {
            layer: (imm >> 16) as u16,
            chunk: (imm & 0xFFFF) as u16,
        }
    }
}

/// Geometry of a staged transfer. Layers are equal-sized and laid out
/// back to back; chunks tile each layer, the last one possibly short.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvLayout {
    pub layer_count: u16,
    pub bytes_per_layer: usize,
    pub chunk_size: usize,
}

impl KvLayout {
    pub fn new(layer_count: u16, bytes_per_layer: usize, chunk_size: usize) -> Result<KvLayout> {
        if layer_count == 0xFFFF {
            return Err(Error::InvalidArgument(
                "layer count must stay below 0xFFFF".into(),
            ));
        }
        if layer_count > 0 && bytes_per_layer == 0 {
            return Err(Error::InvalidArgument("layers must be non-empty".into()));
        }
        if chunk_size == 0 {
            return Err(Error::InvalidArgument("chunk size must be > 0".into()));
        }
        let layout = KvLayout {
            layer_count,
            bytes_per_layer,
            chunk_size,
        };
        if layout.chunks_per_layer() > (u16::MAX as usize) + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} chunks per layer exceed the 16-bit chunk tag",
                layout.chunks_per_layer()
            )));
        }
        Ok(layout)
    }

    pub fn chunks_per_layer(&self) -> usize {
        if self.layer_count == 0 {
            return 0;
        }
        self.bytes_per_layer.div_ceil(self.chunk_size)
    }

    pub fn total_chunks(&self) -> usize {
        self.layer_count as usize * self.chunks_per_layer()
    }

    pub fn total_bytes(&self) -> usize {
        self.layer_count as usize * self.bytes_per_layer
    }

    /// Landing offset: `layer * bytes_per_layer + chunk * chunk_size`.
    pub fn offset(&self, layer: u16, chunk: u16) -> usize {
        layer as usize * self.bytes_per_layer + chunk as usize * self.chunk_size
    }

    pub fn chunk_len(&self, chunk: u16) -> usize {
        let start = chunk as usize * self.chunk_size;
        self.chunk_size.min(self.bytes_per_layer - start)
    }

    fn slot(&self, layer: u16, chunk: u16) -> Option<usize> {
        if (layer as usize) < self.layer_count as usize
            && (chunk as usize) < self.chunks_per_layer()
        {
            Some(layer as usize * self.chunks_per_layer() + chunk as usize)
        } else {
            None
        }
    }
}

/// Copies per-layer fragment lists into a freshly allocated staging
/// buffer. Every layer must total the same byte count; `None` return for
/// `bytes_per_layer` is inferred from layer 0.
pub fn consolidate(
    registry: &Registry,
    fragments: &[Vec<Vec<u8>>],
    chunk_size: usize,
) -> Result<(BufferId, KvLayout, Duration)> {
    let t0 = Instant::now();
    if fragments.is_empty() {
        return Err(Error::InvalidArgument(
            "consolidation needs at least one layer".into(),
        ));
    }
    let bytes_per_layer: usize = fragments[0].iter().map(|f| f.len()).sum();
    for (i, layer) in fragments.iter().enumerate() {
        let total: usize = layer.iter().map(|f| f.len()).sum();
        if total != bytes_per_layer {
            return Err(Error::InvalidArgument(format!(
                "layer {i} totals {total} bytes, expected {bytes_per_layer}; \
                 layers must consolidate to equal sizes"
            )));
        }
    }
    let layout = KvLayout::new(fragments.len() as u16, bytes_per_layer, chunk_size)?;
    let buffer = registry.create_buffer(
        layout.total_bytes(),
        crate::registry::AllocClass::PageBacked,
        None,
    )?;
    let mut staged = Vec::with_capacity(layout.total_bytes());
    for layer in fragments {
        for frag in layer {
            staged.extend_from_slice(frag);
        }
    }
    registry.write_backing(buffer, 0, &staged)?;
    Ok((buffer, layout, t0.elapsed()))
}

pub struct SendConfig {
    pub layout: KvLayout,
    /// Completion-credit bound; must not exceed the send CQ depth.
    pub max_credits: u64,
    pub high_watermark: u64,
    pub low_watermark: u64,
    /// Receive-window credits granted by the receiver up front.
    pub initial_window: u32,
    /// Test hook: chunks silently not sent, to exercise the receiver's
    /// completeness check.
    pub skip_chunks: Vec<(u16, u16)>,
}

impl SendConfig {
    pub fn for_layout(layout: KvLayout, cq_depth: usize, initial_window: u32) -> SendConfig {
        let max = (cq_depth as u64).min(64).max(1);
        SendConfig {
            layout,
            max_credits: max,
            high_watermark: (max * 3 / 4).max(1),
            low_watermark: (max / 4).max(1),
            initial_window,
            skip_chunks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SendStats {
    pub chunks_sent: u64,
    pub bytes_sent: u64,
    pub credit_stalls: u64,
    pub window_stalls: u64,
    pub transfer_time: Duration,
}

/// Streams every chunk of the staged buffer to the remote landing zone,
/// then the sentinel. The sentinel is posted strictly after all data
/// completions have been polled, so its arrival implies the data arrived.
pub fn send_kv(
    fabric: &Fabric,
    qp: QpId,
    send_cq: CqId,
    src: &MrInfo,
    remote: &RemoteMr,
    cfg: &SendConfig,
) -> Result<SendStats> {
    let layout = cfg.layout;
    if (layout.total_bytes() as u64) > src.length {
        return Err(Error::InvalidArgument(format!(
            "layout needs {} bytes but the staging MR holds {}",
            layout.total_bytes(),
            src.length
        )));
    }
    if (layout.total_bytes() as u64) > remote.length {
        return Err(Error::InvalidArgument(format!(
            "layout needs {} bytes but the remote MR holds {}",
            layout.total_bytes(),
            remote.length
        )));
    }
    let gauge = CreditGauge::new(
        cfg.max_credits,
        cfg.high_watermark,
        cfg.low_watermark,
        fabric.cq_depth(send_cq)?,
    )?;
    let window = SenderWindow::new(cfg.initial_window);
    let t0 = Instant::now();
    let mut stats = SendStats::default();
    let mut outstanding = 0u64;
    let check = |wcs: &[crate::fabric::WorkCompletion]| -> Result<()> {
        for wc in wcs {
            if wc.status != WcStatus::Ok {
                return Err(Error::ChunkFailed {
                    layer: 0,
                    chunk: 0,
                    reason: format!("completion status {:?}", wc.status),
                });
            }
        }
        Ok(())
    };
    for layer in 0..layout.layer_count {
        for chunk in 0..layout.chunks_per_layer() as u16 {
            if cfg.skip_chunks.contains(&(layer, chunk)) {
                continue;
            }
            let drained = gauge.acquire(|| fabric.poll_cq(send_cq, 64))?;
            outstanding -= drained.len() as u64;
            check(&drained).map_err(|_| Error::ChunkFailed {
                layer,
                chunk,
                reason: "an earlier chunk completed with an error".into(),
            })?;
            window.acquire(fabric)?;
            let off = layout.offset(layer, chunk);
            let len = layout.chunk_len(chunk) as u32;
            let sge = Sge {
                addr: src.base + off as u64,
                length: len,
                lkey: src.lkey,
            };
            let imm = encode_tag(layer, chunk)?;
            fabric.rdma_write_imm(qp, Some(sge), remote.base + off as u64, remote.rkey, imm)?;
            outstanding += 1;
            stats.chunks_sent += 1;
            stats.bytes_sent += len as u64;
        }
    }
    // Quiesce: every data completion must be polled before the sentinel
    // goes out, otherwise the sentinel could overtake a failed chunk.
    while outstanding > 0 {
        let wcs = fabric.poll_cq(send_cq, 64)?;
        if wcs.is_empty() {
            std::thread::yield_now();
            continue;
        }
        gauge.release(wcs.len() as u64)?;
        outstanding -= wcs.len() as u64;
        check(&wcs)?;
    }
    // Sentinel: zero-length write with immediate, consuming one window
    // credit like any other tagged arrival.
    window.acquire(fabric)?;
    fabric.rdma_write_imm(qp, None, remote.base, remote.rkey, SENTINEL)?;
    let mut sentinel_done = false;
    while !sentinel_done {
        for wc in fabric.poll_cq(send_cq, 64)? {
            if wc.status != WcStatus::Ok {
                return Err(Error::ChunkFailed {
                    layer: 0xFFFE,
                    chunk: 0xFFFF,
                    reason: format!("sentinel completion status {:?}", wc.status),
                });
            }
            sentinel_done = true;
        }
        if !sentinel_done {
            std::thread::yield_now();
        }
    }
    stats.credit_stalls = gauge.stalls();
    stats.window_stalls = window.stalls();
    stats.transfer_time = t0.elapsed();
    Ok(stats)
}

/// Arrival tracking for one transfer: one bit per expected chunk.
pub struct ArrivalBitmap {
    layout: KvLayout,
    bits: Vec<u64>,
    received: usize,
}

impl ArrivalBitmap {
    pub fn new(layout: KvLayout) -> ArrivalBitmap {
        ArrivalBitmap {
            layout,
            bits: vec![0; layout.total_chunks().div_ceil(64)],
            received: 0,
        }
    }

    /// Marks one arrival. Duplicates and out-of-range tags are faults.
    pub fn mark(&mut self, layer: u16, chunk: u16) -> Result<()> {
        let slot = self.layout.slot(layer, chunk).ok_or(Error::ChunkFailed {
            layer,
            chunk,
            reason: "tag outside the expected layout".into(),
        })?;
        let (word, bit) = (slot / 64, slot % 64);
        if self.bits[word] & (1 << bit) != 0 {
            return Err(Error::DuplicateChunk(layer, chunk));
        }
        self.bits[word] |= 1 << bit;
        self.received += 1;
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.received == self.layout.total_chunks()
    }

    pub fn received(&self) -> usize {
        self.received
    }

    pub fn missing(&self) -> Vec<(u16, u16)> {
        let mut out = Vec::new();
        let per = self.layout.chunks_per_layer();
        for layer in 0..self.layout.layer_count {
            for chunk in 0..per as u16 {
                let slot = layer as usize * per + chunk as usize;
                if self.bits[slot / 64] & (1 << (slot % 64)) == 0 {
                    out.push((layer, chunk));
                }
            }
        }
        out
    }
}

/// Borrow-free view of one reconstructed layer in the landing buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerView {
    pub layer: u16,
    pub offset: usize,
    pub len: usize,
}

pub fn layer_views(layout: &KvLayout) -> Vec<LayerView> {
    (0..layout.layer_count)
        .map(|layer| LayerView {
            layer,
            offset: layer as usize * layout.bytes_per_layer,
            len: layout.bytes_per_layer,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ReceiveStats {
    pub chunks_received: u64,
    pub bytes_received: u64,
    pub views: Vec<LayerView>,
    pub reconstruct_time: Duration,
}

/// Consumes tagged arrivals from `recv_cq` until the sentinel, validating
/// completeness, then tiles the landing buffer into layer views.
///
/// `window`, when present, reposts a receive and returns a credit for
/// every consumed arrival; pass `None` when all receives were pre-posted.
pub fn receive_kv(
    fabric: &Fabric,
    qp: QpId,
    recv_cq: CqId,
    layout: KvLayout,
    window: Option<&ReceiveWindow>,
    timeout: Duration,
) -> Result<ReceiveStats> {
    let deadline = Instant::now() + timeout;
    let mut bitmap = ArrivalBitmap::new(layout);
    let mut bytes = 0u64;
    'outer: loop {
        let wcs = fabric.poll_cq(recv_cq, 64)?;
        if wcs.is_empty() {
            if Instant::now() >= deadline {
                return Err(Error::MissingChunks(bitmap.missing()));
            }
            std::thread::yield_now();
            continue;
        }
        for wc in wcs {
            if wc.status != WcStatus::Ok {
                return Err(Error::ChunkFailed {
                    layer: 0,
                    chunk: 0,
                    reason: format!("receive completion status {:?}", wc.status),
                });
            }
            let imm = wc.imm.ok_or_else(|| {
                Error::Protocol("untagged completion on the transfer CQ".into())
            })?;
            if let Some(win) = window {
                win.replenish(fabric, qp, &[])?;
            }
            match decode_tag(imm) {
                Tag::Sentinel => {
                    if !bitmap.is_complete() {
                        return Err(Error::MissingChunks(bitmap.missing()));
                    }
                    break 'outer;
                }
                Tag::Chunk { layer, chunk } => {
                    bitmap.mark(layer, chunk)?;
                    bytes += wc.byte_len as u64;
                }
            }
        }
    }
    let t0 = Instant::now();
    let views = layer_views(&layout);
    Ok(ReceiveStats {
        chunks_received: bitmap.received() as u64,
        bytes_received: bytes,
        views,
        reconstruct_time: t0.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{FabricConfig, QpState};
    use crate::registry::{AllocClass, RegistryConfig};
    use proptest::prelude::*;

    #[test]
    fn tag_codec_is_bijective() {
        // Oracle: exhaustive over a boundary grid; encode/decode must
        // round-trip and never collide with the sentinel.
        for layer in [0u16, 1, 2, 0x7FFF, 0xFFFE] {
            for chunk in [0u16, 1, 2, 0x7FFF, 0xFFFE, 0xFFFF] {
                let imm = encode_tag(layer, chunk).unwrap();
                assert_ne!(imm, SENTINEL);
                assert_eq!(decode_tag(imm), Tag::Chunk { layer, chunk });
            }
        }
        assert!(encode_tag(0xFFFF, 0).is_err());
        assert_eq!(decode_tag(SENTINEL), Tag::Sentinel);
    }

    #[test]
    fn layout_geometry() {
        let l = KvLayout::new(4, 100, 32).unwrap();
        assert_eq!(l.chunks_per_layer(), 4);
        assert_eq!(l.total_chunks(), 16);
        assert_eq!(l.total_bytes(), 400);
        assert_eq!(l.offset(2, 3), 2 * 100 + 3 * 32);
        assert_eq!(l.chunk_len(0), 32);
        assert_eq!(l.chunk_len(3), 4); // 100 - 96
        assert!(KvLayout::new(0xFFFF, 100, 32).is_err());
        assert!(KvLayout::new(1, 100, 0).is_err());
        assert!(KvLayout::new(1, 0, 32).is_err());
        // 2^16 chunks per layer fits the tag; one more does not.
        assert!(KvLayout::new(1, 65536, 1).is_ok());
        assert!(KvLayout::new(1, 65537, 1).is_err());
    }

    #[test]
    fn consolidate_concatenates_and_validates() {
        let reg = Registry::new(RegistryConfig::default());
        let layers = vec![
            vec![vec![1u8, 2], vec![3, 4, 5]],
            vec![vec![6, 7, 8, 9, 10]],
        ];
        let (buf, layout, _t) = consolidate(&reg, &layers, 2).unwrap();
        assert_eq!(layout.layer_count, 2);
        assert_eq!(layout.bytes_per_layer, 5);
        assert_eq!(
            reg.read_backing(buf, 0, 10).unwrap(),
            vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10]
        );
        assert!(matches!(
            consolidate(&reg, &[], 2),
            Err(Error::InvalidArgument(_))
        ));
        let ragged = vec![vec![vec![1u8, 2]], vec![vec![3u8]]];
        assert!(matches!(
            consolidate(&reg, &ragged, 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn bitmap_tracks_arrivals_duplicates_and_strays() {
        let layout = KvLayout::new(2, 10, 4).unwrap(); // 3 chunks/layer
        let mut bm = ArrivalBitmap::new(layout);
        assert!(!bm.is_complete());
        for layer in 0..2 {
            for chunk in 0..3 {
                bm.mark(layer, chunk).unwrap();
            }
        }
        assert!(bm.is_complete());
        assert!(bm.missing().is_empty());
        assert_eq!(bm.mark(0, 0), Err(Error::DuplicateChunk(0, 0)));
        assert!(matches!(bm.mark(0, 3), Err(Error::ChunkFailed { .. })));
        assert!(matches!(bm.mark(2, 0), Err(Error::ChunkFailed { .. })));
        let mut bm = ArrivalBitmap::new(layout);
        bm.mark(1, 2).unwrap();
        assert_eq!(
            bm.missing(),
            vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)]
        );
    }

    /// Loopback rig with a staged source and remote-accessible landing
    /// zone; all receives pre-posted so the single-threaded test can run
    /// sender and receiver sequentially.
    struct KvRig {
        fabric: Fabric,
        qp_tx: QpId,
        qp_rx: QpId,
        send_cq: CqId,
        recv_cq: CqId,
        src: MrInfo,
        dst_buffer: BufferId,
        remote: RemoteMr,
    }

    fn kv_rig(layout: KvLayout, payload: &[u8]) -> KvRig {
        let fabric = Fabric::setup(
            Registry::new(RegistryConfig::default()),
            FabricConfig::default(),
        )
        .unwrap();
        let reg = fabric.registry().clone();
        // Deep enough for every tagged arrival plus the sentinel; a
        // shallower CQ would overflow under the all-preposted scheme.
        let depth = (layout.total_chunks() + 2).max(512);
        let send_cq = fabric.create_cq(depth).unwrap();
        let recv_cq = fabric.create_cq(depth).unwrap();
        let qp_tx = fabric.create_qp(send_cq, fabric.recv_cq()).unwrap();
        let qp_rx = fabric.create_qp(fabric.send_cq(), recv_cq).unwrap();
        for qp in [qp_tx, qp_rx] {
            fabric.modify_qp(qp, QpState::Init).unwrap();
            fabric.modify_qp(qp, QpState::Rtr).unwrap();
            fabric.modify_qp(qp, QpState::Rts).unwrap();
        }
        fabric.connect_loopback(qp_tx, qp_rx).unwrap();
        let stage = reg
            .create_buffer(layout.total_bytes().max(1), AllocClass::PageBacked, None)
            .unwrap();
        reg.write_backing(stage, 0, payload).unwrap();
        let land = reg
            .create_buffer(layout.total_bytes().max(1), AllocClass::PageBacked, None)
            .unwrap();
        let src = fabric.register_mr(stage, false).unwrap();
        let dst = fabric.register_mr(land, true).unwrap();
        // Pre-post every receive the transfer will consume (+ sentinel).
        for _ in 0..layout.total_chunks() + 1 {
            fabric.post_recv(qp_rx, &[]).unwrap();
        }
        let remote = RemoteMr {
            base: dst.base,
            length: dst.length,
            rkey: dst.rkey.unwrap(),
        };
        KvRig {
            fabric,
            qp_tx,
            qp_rx,
            send_cq,
            recv_cq,
            src,
            dst_buffer: land,
            remote,
        }
    }

    #[test]
    fn four_by_four_loopback_transfer_is_exact() {
        // 4 layers x 4 chunks of 1 KiB: 16 tagged writes + sentinel.
        let layout = KvLayout::new(4, 4096, 1024).unwrap();
        let payload: Vec<u8> = (0..layout.total_bytes())
            .map(|i| (i * 31 % 253) as u8)
            .collect();
        let r = kv_rig(layout, &payload);
        let cfg = SendConfig {
            layout,
            max_credits: 8,
            high_watermark: 6,
            low_watermark: 2,
            initial_window: 17,
            skip_chunks: Vec::new(),
        };
        let sent = send_kv(&r.fabric, r.qp_tx, r.send_cq, &r.src, &r.remote, &cfg).unwrap();
        assert_eq!(sent.chunks_sent, 16);
        assert_eq!(sent.bytes_sent, layout.total_bytes() as u64);
        let got = receive_kv(
            &r.fabric,
            r.qp_rx,
            r.recv_cq,
            layout,
            None,
            Duration::from_secs(5),
        )
        .unwrap();
        assert_eq!(got.chunks_received, 16);
        assert_eq!(got.bytes_received, layout.total_bytes() as u64);
        assert_eq!(got.views.len(), 4);
        // Byte-exact reconstruction, layer by layer through the views.
        let reg = r.fabric.registry();
        for view in &got.views {
            let land = reg
                .read_backing(r.dst_buffer, view.offset, view.len)
                .unwrap();
            assert_eq!(land, payload[view.offset..view.offset + view.len]);
        }
        assert_eq!(r.fabric.rnr_events(), 0);
        assert_eq!(r.fabric.cq_overflow_count(r.send_cq).unwrap(), 0);
    }

    #[test]
    fn skipped_chunk_is_reported_missing_at_the_sentinel() {
        let layout = KvLayout::new(3, 1024, 512).unwrap();
        let payload = vec![7u8; layout.total_bytes()];
        let r = kv_rig(layout, &payload);
        let cfg = SendConfig {
            layout,
            max_credits: 8,
            high_watermark: 6,
            low_watermark: 2,
            initial_window: 8,
            skip_chunks: vec![(2, 1)],
        };
        send_kv(&r.fabric, r.qp_tx, r.send_cq, &r.src, &r.remote, &cfg).unwrap();
        let err = receive_kv(
            &r.fabric,
            r.qp_rx,
            r.recv_cq,
            layout,
            None,
            Duration::from_secs(5),
        )
        .unwrap_err();
        assert_eq!(err, Error::MissingChunks(vec![(2, 1)]));
    }

    #[test]
    fn duplicate_arrival_is_a_fault() {
        let layout = KvLayout::new(1, 512, 512).unwrap();
        let payload = vec![1u8; 512];
        let r = kv_rig(layout, &payload);
        let imm = encode_tag(0, 0).unwrap();
        let sge = Sge {
            addr: r.src.base,
            length: 512,
            lkey: r.src.lkey,
        };
        for _ in 0..2 {
            r.fabric
                .rdma_write_imm(r.qp_tx, Some(sge), r.remote.base, r.remote.rkey, imm)
                .unwrap();
        }
        r.fabric
            .rdma_write_imm(r.qp_tx, None, r.remote.base, r.remote.rkey, SENTINEL)
            .unwrap();
        let err = receive_kv(
            &r.fabric,
            r.qp_rx,
            r.recv_cq,
            layout,
            None,
            Duration::from_secs(5),
        )
        .unwrap_err();
        assert_eq!(err, Error::DuplicateChunk(0, 0));
    }

    #[test]
    fn empty_layout_transfers_only_the_sentinel() {
        let layout = KvLayout::new(0, 0, 64).unwrap();
        let r = kv_rig(layout, &[]);
        let cfg = SendConfig::for_layout(layout, 512, 1);
        let sent = send_kv(&r.fabric, r.qp_tx, r.send_cq, &r.src, &r.remote, &cfg).unwrap();
        assert_eq!(sent.chunks_sent, 0);
        let got = receive_kv(
            &r.fabric,
            r.qp_rx,
            r.recv_cq,
            layout,
            None,
            Duration::from_secs(5),
        )
        .unwrap();
        assert_eq!(got.chunks_received, 0);
        assert!(got.views.is_empty());
    }

    #[test]
    fn undersized_remote_region_is_rejected_up_front() {
        let layout = KvLayout::new(2, 1024, 512).unwrap();
        let payload = vec![0u8; layout.total_bytes()];
        let r = kv_rig(layout, &payload);
        let small = RemoteMr {
            base: r.remote.base,
            length: 100,
            rkey: r.remote.rkey,
        };
        let cfg = SendConfig::for_layout(layout, 512, 8);
        assert!(matches!(
            send_kv(&r.fabric, r.qp_tx, r.send_cq, &r.src, &small, &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_layouts_transfer_byte_exactly(
            layer_count in 1u16..6,
            bytes_per_layer in 1usize..3000,
            chunk_size in 1usize..700,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let layout = KvLayout::new(layer_count, bytes_per_layer, chunk_size).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let payload: Vec<u8> = (0..layout.total_bytes()).map(|_| rng.gen()).collect();
            let r = kv_rig(layout, &payload);
            let cfg = SendConfig::for_layout(layout, 512, layout.total_chunks() as u32 + 1);
            send_kv(&r.fabric, r.qp_tx, r.send_cq, &r.src, &r.remote, &cfg).unwrap();
            let got = receive_kv(
                &r.fabric, r.qp_rx, r.recv_cq, layout, None, Duration::from_secs(10),
            ).unwrap();
            prop_assert_eq!(got.chunks_received as usize, layout.total_chunks());
            let land = r
                .fabric
                .registry()
                .read_backing(r.dst_buffer, 0, layout.total_bytes())
                .unwrap();
            prop_assert_eq!(land, payload);
        }
    }
}
