//! The stateless, uniquely named checkpoint coordinator.
//!
//! One epoch at a time (blocking): `initiate` opens the epoch in the store
//! and expresses a one-way `check` interest to every registered process.
//! Completion flows back as done-report transfers; when all registered
//! processes have reported, the manifest commit flag is rewritten (last,
//! atomically) and a `check/resume` interest releases everyone. An epoch that
//! does not complete within the abort window is abandoned and its number
//! reused, so committed epochs stay strictly increasing.
//!
//! Nothing the coordinator needs outlives a commit: the registry and the next
//! epoch number are reconstructed from the snapshot store, which is what lets
//! a crashed coordinator restart mid-deployment without disturbing the
//! processes.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::checkpoint::store::{SnapshotStore, StoreError};
use crate::fabric::{Command, Effects, HandlerInfo, NodeHandler, NodeId, ReceivedInterest};
use crate::names::{Signal, StructuredName};
use crate::process::DoneReport;
use crate::trace::{Event, Layer, Tick};

/// Timer token scenario drivers use to trigger `initiate_checkpoint`.
pub const TOKEN_INITIATE: u64 = 10;
/// Abort timers encode the epoch: `TOKEN_ABORT_BASE + epoch`.
pub const TOKEN_ABORT_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoordinatorError {
    #[error("checkpoint for epoch {0} still in progress")]
    CheckpointInProgress(u64),
}

#[derive(Debug)]
struct EpochRun {
    epoch: u64,
    awaiting: BTreeSet<NodeId>,
}

/// Coordinator handler; runs on a designated node, addressed purely by name.
pub struct Coordinator {
    node: NodeId,
    app: String,
    comms: crate::messaging::CommsState,
    registered: BTreeSet<NodeId>,
    next_epoch: u64,
    in_progress: Option<EpochRun>,
    abort_window: Tick,
}

impl Coordinator {
    pub fn new(node: &str, app: &str, abort_window: Tick) -> Self {
        Self {
            node: node.to_string(),
            app: app.to_string(),
            comms: crate::messaging::CommsState::new(node, app, Layer::Ckpt),
            registered: BTreeSet::new(),
            next_epoch: 1,
            in_progress: None,
            abort_window,
        }
    }

    /// Reconstructs a coordinator from the store after a crash: registry from
    /// `registry.json`, next epoch from the latest committed manifest.
    pub fn from_store(
        node: &str,
        app: &str,
        abort_window: Tick,
        store: &SnapshotStore,
    ) -> Result<Self, StoreError> {
        let mut c = Self::new(node, app, abort_window);
        c.registered = store.read_registry()?.into_iter().collect();
        c.next_epoch = store.latest_committed()?.map(|e| e + 1).unwrap_or(1);
        Ok(c)
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn registered(&self) -> &BTreeSet<NodeId> {
        &self.registered
    }

    pub fn next_epoch(&self) -> u64 {
        self.next_epoch
    }

    pub fn in_progress(&self) -> Option<u64> {
        self.in_progress.as_ref().map(|r| r.epoch)
    }

    /// Adds a process to the registry; re-registration is a no-op.
    pub fn register(&mut self, process: &str) -> bool {
        self.registered.insert(process.to_string())
    }

    /// Starts a checkpoint epoch: one-way check interests to every registered
    /// process. Rejected while a prior epoch is in progress.
    pub fn initiate(&mut self, eff: &mut Effects) -> Result<u64, CoordinatorError> {
        if let Some(run) = &self.in_progress {
            return Err(CoordinatorError::CheckpointInProgress(run.epoch));
        }
        let epoch = self.next_epoch;
        let processes: Vec<NodeId> = self.registered.iter().cloned().collect();
        eff.emit(Event::CheckpointInit { epoch });
        eff.push(Command::OpenEpoch {
            epoch,
            processes: processes.clone(),
        });
        if processes.is_empty() {
            // Nothing to suspend: the epoch commits immediately.
            eff.push(Command::CommitEpoch {
                epoch,
                processes,
            });
            self.next_epoch = epoch + 1;
            return Ok(epoch);
        }
        for p in &processes {
            eff.express(StructuredName::check(&self.app, p));
        }
        self.in_progress = Some(EpochRun {
            epoch,
            awaiting: self.registered.clone(),
        });
        eff.timer(self.abort_window, TOKEN_ABORT_BASE + epoch);
        Ok(epoch)
    }

    fn on_done_report(&mut self, report: DoneReport, eff: &mut Effects) {
        let Some(run) = &mut self.in_progress else {
            return; // stale report from an abandoned epoch
        };
        run.awaiting.remove(&report.process);
        if !run.awaiting.is_empty() {
            return;
        }
        let epoch = run.epoch;
        let processes: Vec<NodeId> = self.registered.iter().cloned().collect();
        eff.push(Command::CommitEpoch {
            epoch,
            processes: processes.clone(),
        });
        for p in &processes {
            eff.express(StructuredName::resume(&self.app, p));
        }
        self.in_progress = None;
        self.next_epoch = epoch + 1;
    }

    fn abort(&mut self, epoch: u64, eff: &mut Effects) {
        let matches_epoch = self
            .in_progress
            .as_ref()
            .map(|r| r.epoch == epoch)
            .unwrap_or(false);
        if !matches_epoch {
            return;
        }
        eff.emit(Event::EpochAbort {
            epoch,
            node: self.node.clone(),
        });
        eff.push(Command::AbortEpoch { epoch });
        for p in self.registered.clone() {
            eff.express(StructuredName::resume(&self.app, &p));
        }
        self.in_progress = None;
        // The epoch number is reused on retry; committed epochs alone form
        // the strictly increasing sequence.
    }
}

impl NodeHandler for Coordinator {
    fn on_interest(&mut self, _info: HandlerInfo, ri: &ReceivedInterest, eff: &mut Effects) {
        match ri.name.signal {
            Signal::Rts => self.comms.on_rts(ri, eff),
            Signal::Cts => self.comms.on_cts(ri, eff),
            Signal::Flush => self.comms.on_flush_request(ri, eff),
            Signal::Discover => eff.satisfy(ri.name.clone(), ri.nonce, b"alive".to_vec()),
            _ => {}
        }
    }

    fn on_data(
        &mut self,
        info: HandlerInfo,
        name: &StructuredName,
        _nonce: u64,
        payload: &[u8],
        eff: &mut Effects,
    ) {
        match name.signal {
            Signal::Rts | Signal::Cts => {
                self.comms.on_data(name, payload, info.now, eff);
                for p in self.comms.take_delivered() {
                    if let Some(report) = DoneReport::decode(&p.bytes) {
                        self.on_done_report(report, eff);
                    }
                }
            }
            _ => {}
        }
    }

    fn on_expired(
        &mut self,
        _info: HandlerInfo,
        name: &StructuredName,
        _nonce: u64,
        eff: &mut Effects,
    ) {
        // Check and resume interests are one-way notifications: they expire
        // unanswered by design. Transfer interests go through comms.
        if matches!(name.signal, Signal::Rts | Signal::Cts) {
            self.comms.on_expired(name, eff);
        }
    }

    fn on_timer(&mut self, _info: HandlerInfo, token: u64, eff: &mut Effects) {
        if token == TOKEN_INITIATE {
            let _ = self.initiate(eff);
        } else if token > TOKEN_ABORT_BASE {
            self.abort(token - TOKEN_ABORT_BASE, eff);
        }
    }

    fn as_any(&self) -> Option<&dyn std::any::Any> {
        Some(self)
    }

    fn as_any_mut(&mut self) -> Option<&mut dyn std::any::Any> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_is_idempotent() {
        let mut c = Coordinator::new("coord", "fib", 1000);
        assert!(c.register("n0"));
        assert!(!c.register("n0"));
        assert_eq!(c.registered().len(), 1);
    }

    #[test]
    fn empty_registry_commits_immediately() {
        let mut c = Coordinator::new("coord", "fib", 1000);
        let mut eff = Effects::default();
        let epoch = c.initiate(&mut eff).unwrap();
        assert_eq!(epoch, 1);
        assert_eq!(c.next_epoch(), 2);
        assert!(c.in_progress().is_none());
        assert!(eff
            .commands()
            .iter()
            .any(|c| matches!(c, Command::CommitEpoch { epoch: 1, .. })));
    }

    #[test]
    fn second_initiation_rejected_until_commit() {
        let mut c = Coordinator::new("coord", "fib", 1000);
        c.register("n0");
        let mut eff = Effects::default();
        let epoch = c.initiate(&mut eff).unwrap();
        assert_eq!(
            c.initiate(&mut eff).unwrap_err(),
            CoordinatorError::CheckpointInProgress(epoch)
        );
        // Done report closes the epoch; the next initiation is accepted.
        let mut eff2 = Effects::default();
        c.on_done_report(
            DoneReport {
                process: "n0".into(),
            },
            &mut eff2,
        );
        assert!(c.in_progress().is_none());
        assert_eq!(c.next_epoch(), 2);
        assert!(c.initiate(&mut Effects::default()).is_ok());
    }

    #[test]
    fn abort_reuses_the_epoch_number() {
        let mut c = Coordinator::new("coord", "fib", 1000);
        c.register("n0");
        let mut eff = Effects::default();
        let epoch = c.initiate(&mut eff).unwrap();
        c.abort(epoch, &mut Effects::default());
        assert!(c.in_progress().is_none());
        assert_eq!(c.next_epoch(), epoch, "uncommitted epoch number is reused");
    }

    #[test]
    fn rebuilds_from_store() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::new(dir.path().join("store")).unwrap();
        store.write_registry(&["n0".into(), "n1".into()]).unwrap();
        store.commit_epoch(3, &["n0".into(), "n1".into()]).unwrap();
        let c = Coordinator::from_store("coord", "fib", 1000, &store).unwrap();
        assert_eq!(c.next_epoch(), 4);
        assert_eq!(c.registered().len(), 2);
    }
}
