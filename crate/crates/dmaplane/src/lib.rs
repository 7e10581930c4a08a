//! dmaplane: user-space buffer orchestration.
//!
//! Subsystems, in dependency order: a buffer registry (lifecycle,
//! mapping counts, export/attach sharing, revocable regions, lock-order
//! validation), ring-based command channels with worker threads, a
//! simulated RDMA verbs fabric (PD/CQ/QP/MR chain, WRITE WITH IMMEDIATE,
//! reverse teardown), dual credit-based flow control, NUMA placement with
//! explicit fallback reporting, observability (counters, histogram,
//! events), and the chunked KV-transfer pipeline on top.

pub mod channel;
pub mod error;
pub mod fabric;
pub mod flow;
pub mod kv;
pub mod lock_order;
pub mod observe;
pub mod placement;
pub mod registry;
pub mod ring;

pub use error::{Error, Result};
pub use lock_order::{LockLevel, LockOrderValidator, OrderViolation};
pub use registry::{AllocClass, BufferId, Registry, RegistryConfig};

use std::sync::Arc;

/// Composed shutdown in the required order: observability detach, then
/// fabric teardown, then registry destruction.
pub fn shutdown_sequence(
    obs: &observe::Observability,
    fabric: &fabric::Fabric,
    registry: &Registry,
) -> fabric::TeardownReport {
    obs.detach();
    let report = fabric.teardown();
    registry.destroy_all();
    report
}

/// Convenience bundle used by the CLI and tests.
pub fn default_validator() -> Arc<LockOrderValidator> {
    Arc::new(LockOrderValidator::new(true))
}
