//! Restart from the latest committed global checkpoint.
//!
//! The whole computation restarts together (global blocking checkpoints pair
//! with global restarts): routers come back with empty FIB/PIT, the
//! coordinator is rebuilt from the store, every process is rebuilt from its
//! snapshot and re-registers its prefix, and only then do handlers boot; at
//! which point each process runs discovery and re-expresses the interests its
//! snapshot left unanswered (their PIT breadcrumbs died with the routers).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::store::{SnapshotStore, StoreError};
use crate::coordinator::Coordinator;
use crate::fabric::{Fabric, FabricError, NodeId};
use crate::names::NamePrefix;
use crate::process::{Process, ProcessConfig};
use crate::trace::Tick;

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("epoch {0} exists but is not committed")]
    NotCommitted(u64),
    #[error("process {0:?} is still alive; restart applies to a halted system")]
    ProcessAlive(String),
    #[error("restart plan names {process:?} but the store has no snapshot for it")]
    MissingProcess { process: String },
}

/// What a restart will do: which committed epoch, which processes, and which
/// unanswered interests each re-expresses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartPlan {
    pub epoch: u64,
    pub processes: Vec<NodeId>,
    pub pending_to_reissue: BTreeMap<NodeId, Vec<String>>,
}

/// Selects the requested epoch, or the latest committed one by default; an
/// uncommitted epoch is never selected.
pub fn plan_restart(store: &SnapshotStore, epoch: Option<u64>) -> Result<RestartPlan, RecoveryError> {
    let committed = store.committed_epochs()?;
    let epoch = match epoch {
        Some(e) => {
            if !committed.contains(&e) {
                return Err(RecoveryError::NotCommitted(e));
            }
            e
        }
        None => *committed.last().ok_or(StoreError::NoCheckpoint)?,
    };
    let global = store.load_global(epoch)?;
    let mut pending = BTreeMap::new();
    for (p, snap) in &global.snapshots {
        pending.insert(p.clone(), snap.body.unanswered_interests.clone());
    }
    Ok(RestartPlan {
        epoch,
        processes: global.snapshots.keys().cloned().collect(),
        pending_to_reissue: pending,
    })
}

/// Per-deployment knobs for rebuilding handlers.
#[derive(Debug, Clone)]
pub struct RestartOptions {
    /// Coordinator node to restart alongside the processes, if any.
    pub coordinator: Option<NodeId>,
    /// Application namespace (used to re-register the coordinator prefix).
    pub app_name: String,
    pub abort_window: Tick,
}

/// Restarts the halted system from `plan`: routers, coordinator, then every
/// process with its restored state; prefixes re-registered before any handler
/// boots so discovery probes route immediately.
pub fn restart_all(
    fabric: &mut Fabric,
    plan: &RestartPlan,
    opts: &RestartOptions,
) -> Result<(), RecoveryError> {
    for p in &plan.processes {
        if fabric.node_alive(p) {
            return Err(RecoveryError::ProcessAlive(p.clone()));
        }
    }
    let store = fabric
        .store()
        .cloned()
        .ok_or(StoreError::NoCheckpoint)?;

    let routers: Vec<NodeId> = fabric.topology().routers.clone();
    for r in routers {
        if !fabric.node_alive(&r) {
            fabric.restart_node(&r)?;
        }
    }

    // Load snapshots first so a broken store aborts before mutating nodes.
    let mut snapshots = Vec::new();
    for p in &plan.processes {
        let snap = store
            .load_snapshot(plan.epoch, p)
            .map_err(|_| RecoveryError::MissingProcess { process: p.clone() })?;
        snapshots.push(snap);
    }

    // Every vertex comes up before any prefix is re-announced, so routes
    // install on all of them; registering while a peer is still down would
    // leave that peer without a path out.
    if let Some(coord) = &opts.coordinator {
        if !fabric.node_alive(coord) {
            fabric.restart_node(coord)?;
        }
    }
    for snap in &snapshots {
        fabric.restart_node(&snap.body.process)?;
    }
    if let Some(coord) = &opts.coordinator {
        let prefix = NamePrefix(vec![opts.app_name.clone(), coord.clone()]);
        fabric.register_prefix(coord, &prefix)?;
    }
    for snap in &snapshots {
        let p = &snap.body.process;
        let prefix = NamePrefix(vec![snap.body.app.clone(), p.clone()]);
        fabric.register_prefix(p, &prefix)?;
    }

    // All prefixes routable: now boot handlers (discovery begins).
    if let Some(coord) = &opts.coordinator {
        let handler = Coordinator::from_store(coord, &opts.app_name, opts.abort_window, &store)?;
        fabric.attach_handler(coord, Box::new(handler))?;
    }
    for snap in &snapshots {
        let p = snap.body.process.clone();
        let pending = plan
            .pending_to_reissue
            .get(&p)
            .cloned()
            .unwrap_or_default();
        let config = ProcessConfig {
            coordinator: opts.coordinator.clone(),
            abort_window: opts.abort_window,
            ..ProcessConfig::default()
        };
        let process = Process::from_snapshot(snap, pending, config);
        fabric.attach_handler(&p, Box::new(process))?;
    }
    Ok(())
}
