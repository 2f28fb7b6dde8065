//! Deterministic simulator and protocol library for checkpointing distributed
//! applications over a content centric network.
//!
//! The crate is organized in layers that mirror the system's architecture:
//!
//! * [`names`]: the hierarchical `ccnx://` interest naming scheme (RTS, CTS,
//!   check, flush, discover signals).
//! * [`fabric`]: a deterministic discrete-event CCN: nodes, routers, FIB
//!   longest-prefix forwarding, PIT breadcrumbs, fail-stop crash/restart.
//! * [`messaging`]: the sender-driven RTS/CTS data transfer handshake with
//!   per-channel FIFO sequencing and send logs.
//! * [`process`] / [`coordinator`]: per-node protocol agents: the
//!   communication + checkpoint handler stack on each application node, and
//!   the stateless named coordinator that drives blocking checkpoints.
//! * [`checkpoint`]: the snapshot store on disk and the offline consistency
//!   verifier that brute-forces the trace for orphan messages.
//! * [`recovery`]: restart from the latest committed global checkpoint:
//!   prefix re-registration, namespace discovery, pending-interest
//!   re-expression.
//! * [`apps`]: the evaluation applications (counter, ring fibonacci) as
//!   deterministic state machines.
//! * [`scenario`]: scenario files, the runner, fault injection, and the
//!   output-equivalence oracle.
//!
//! Every run is a pure function of `(topology, seed, scenario script)`: two
//! runs with equal inputs produce byte-identical traces.

pub mod apps;
pub mod checkpoint;
pub mod coordinator;
pub mod fabric;
pub mod messaging;
pub mod names;
pub mod process;
pub mod recovery;
pub mod scenario;
pub mod trace;
