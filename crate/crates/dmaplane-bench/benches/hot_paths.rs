//! Microbenchmarks for the per-operation hot paths: immediate-tag
//! encoding, histogram recording, ring dispatch, and a full loopback
//! write (post + poll).

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use std::hint::black_box;

use dmaplane::fabric::{Fabric, FabricConfig, QpState, Sge};
use dmaplane::kv::{decode_tag, encode_tag};
use dmaplane::observe::LatencyHistogram;
use dmaplane::registry::AllocClass;
use dmaplane::ring::Ring;
use dmaplane::{Registry, RegistryConfig};

fn bench_tag_codec(c: &mut Criterion) {
    c.bench_function("tag_encode_decode", |b| {
        b.iter(|| {
            let imm = encode_tag(black_box(12), black_box(345)).unwrap();
            black_box(decode_tag(black_box(imm)))
        })
    });
}

fn bench_histogram_record(c: &mut Criterion) {
    let hist = LatencyHistogram::new();
    let mut x = 1u64;
    c.bench_function("histogram_record", |b| {
        b.iter(|| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
            hist.record_micros(black_box(x % 5000));
        })
    });
    black_box(hist.total());
}

fn bench_ring_dispatch(c: &mut Criterion) {
    c.bench_function("ring_push_pop", |b| {
        b.iter_batched(
            || Ring::with_capacity(256).unwrap(),
            |mut ring: Ring<u64>| {
                for i in 0..256u64 {
                    ring.push(i).unwrap();
                }
                let mut sum = 0u64;
                while let Some(v) = ring.pop() {
                    sum = sum.wrapping_add(v);
                }
                black_box(sum)
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_loopback_write(c: &mut Criterion) {
    let fabric = Fabric::setup(
        Registry::new(RegistryConfig::default()),
        FabricConfig::default(),
    )
    .unwrap();
    let reg = fabric.registry().clone();
    let src_buf = reg.create_buffer(64 << 10, AllocClass::PageBacked, None).unwrap();
    let dst_buf = reg.create_buffer(64 << 10, AllocClass::PageBacked, None).unwrap();
    let qp_a = fabric.create_qp(fabric.send_cq(), fabric.recv_cq()).unwrap();
    let qp_b = fabric.create_qp(fabric.send_cq(), fabric.recv_cq()).unwrap();
    for qp in [qp_a, qp_b] {
        fabric.modify_qp(qp, QpState::Init).unwrap();
        fabric.modify_qp(qp, QpState::Rtr).unwrap();
        fabric.modify_qp(qp, QpState::Rts).unwrap();
    }
    fabric.connect_loopback(qp_a, qp_b).unwrap();
    let src = fabric.register_mr(src_buf, false).unwrap();
    let dst = fabric.register_mr(dst_buf, true).unwrap();
    let sge = Sge {
        addr: src.base,
        length: 4096,
        lkey: src.lkey,
    };
    let mut group = c.benchmark_group("loopback");
    group.throughput(Throughput::Bytes(4096));
    group.bench_function("rdma_write_4k_post_poll", |b| {
        b.iter(|| {
            fabric
                .rdma_write(qp_a, sge, dst.base, dst.rkey.unwrap())
                .unwrap();
            black_box(fabric.poll_cq(fabric.send_cq(), 1).unwrap());
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_tag_codec,
    bench_histogram_record,
    bench_ring_dispatch,
    bench_loopback_write
);
criterion_main!(benches);
