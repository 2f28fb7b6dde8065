//! Blocking coordinated checkpointing: snapshot store and consistency
//! verification.
//!
//! The protocol itself is distributed across the per-node agents: the
//! [`crate::coordinator`] issues one-way check interests and commits epochs;
//! each [`crate::process`] suspends sends, flushes its channels, persists its
//! local snapshot, and reports done. This module owns the durable artifacts
//! (one snapshot file per `(epoch, process)` plus a per-epoch manifest whose
//! commit flag is written last) and the offline verifier that brute-forces a
//! trace for orphan messages and in-flight payloads.

pub mod store;
pub mod verify;

pub use store::{GlobalCheckpoint, LocalSnapshot, QueuedPayload, SnapshotBody, SnapshotStore, StoreError};
pub use verify::{check_blocking, check_handshake_shape, verify_consistency, ConsistencyReport};
