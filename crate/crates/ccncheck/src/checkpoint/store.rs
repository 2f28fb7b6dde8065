//! Durable snapshot store.
//!
//! Layout under the store root:
//!
//! ```text
//! <root>/registry.json                  {"processes":[...]}
//! <root>/<epoch>/MANIFEST.json          {"epoch":N,"processes":[...],"committed":bool}
//! <root>/<epoch>/<process>.snap.json    one LocalSnapshot, app state base64-embedded
//! ```
//!
//! The manifest's commit flag is rewritten last via atomic rename, so a crash
//! while checkpointing leaves either no manifest or an uncommitted one;
//! restarts never select an uncommitted epoch.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::messaging::CommsSnapshot;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("store serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no committed checkpoint in store")]
    NoCheckpoint,
    #[error("epoch {0} is not committed")]
    NotCommitted(u64),
    #[error("missing snapshot for process {process:?} in epoch {epoch}")]
    MissingSnapshot { epoch: u64, process: String },
}

/// A payload delivered before the snapshot but not yet consumed by the
/// application; replayed into the application on resume or restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedPayload {
    pub from: String,
    pub transfer: u64,
    pub seq: u64,
    /// Base64 of the application bytes.
    pub payload: String,
}

/// Everything a process contributes to its local snapshot. The epoch is
/// stamped by the store when persisting, since the one-way check interest
/// carries no epoch number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotBody {
    pub process: String,
    /// Application namespace the process runs under.
    pub app: String,
    /// Base64 of the application's serialized state machine.
    pub app_state: String,
    pub channel_logs: CommsSnapshot,
    /// Interests expressed with no data yet; re-expressed on restart because
    /// their PIT breadcrumbs die with the routers.
    pub unanswered_interests: Vec<String>,
    pub delivered_not_consumed: Vec<QueuedPayload>,
}

/// A persisted per-process snapshot at an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSnapshot {
    pub epoch: u64,
    #[serde(flatten)]
    pub body: SnapshotBody,
}

/// A committed set of local snapshots forming a consistent cut.
#[derive(Debug, Clone)]
pub struct GlobalCheckpoint {
    pub epoch: u64,
    pub committed: bool,
    pub snapshots: BTreeMap<String, LocalSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub epoch: u64,
    pub processes: Vec<String>,
    pub committed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Registry {
    processes: Vec<String>,
}

/// Filesystem-backed snapshot store; all access is serialized through the
/// owning fabric or the CLI.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    root: PathBuf,
}

impl SnapshotStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn epoch_dir(&self, epoch: u64) -> PathBuf {
        self.root.join(epoch.to_string())
    }

    fn manifest_path(&self, epoch: u64) -> PathBuf {
        self.epoch_dir(epoch).join("MANIFEST.json")
    }

    fn snapshot_path(&self, epoch: u64, process: &str) -> PathBuf {
        self.epoch_dir(epoch).join(format!("{process}.snap.json"))
    }

    fn write_atomic(&self, path: &Path, contents: &str) -> Result<(), StoreError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, contents)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Opens an epoch directory with an uncommitted manifest.
    pub fn open_epoch(&self, epoch: u64, processes: &[String]) -> Result<(), StoreError> {
        fs::create_dir_all(self.epoch_dir(epoch))?;
        let m = Manifest {
            epoch,
            processes: processes.to_vec(),
            committed: false,
        };
        self.write_atomic(&self.manifest_path(epoch), &serde_json::to_string(&m)?)
    }

    /// Rewrites the manifest with the commit flag set, atomically and last.
    pub fn commit_epoch(&self, epoch: u64, processes: &[String]) -> Result<(), StoreError> {
        fs::create_dir_all(self.epoch_dir(epoch))?;
        let m = Manifest {
            epoch,
            processes: processes.to_vec(),
            committed: true,
        };
        self.write_atomic(&self.manifest_path(epoch), &serde_json::to_string(&m)?)
    }

    pub fn save_snapshot(&self, epoch: u64, body: &SnapshotBody) -> Result<(), StoreError> {
        fs::create_dir_all(self.epoch_dir(epoch))?;
        let snap = LocalSnapshot {
            epoch,
            body: body.clone(),
        };
        let path = self.snapshot_path(epoch, &body.process);
        self.write_atomic(&path, &serde_json::to_string(&snap)?)
    }

    pub fn load_manifest(&self, epoch: u64) -> Result<Manifest, StoreError> {
        let raw = fs::read_to_string(self.manifest_path(epoch))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn load_snapshot(&self, epoch: u64, process: &str) -> Result<LocalSnapshot, StoreError> {
        let path = self.snapshot_path(epoch, process);
        if !path.exists() {
            return Err(StoreError::MissingSnapshot {
                epoch,
                process: process.to_string(),
            });
        }
        let raw = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&raw)?)
    }

    /// All epoch directories present, ascending.
    pub fn list_epochs(&self) -> Result<Vec<u64>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                if let Ok(n) = entry.file_name().to_string_lossy().parse::<u64>() {
                    out.push(n);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Epochs whose manifest carries the commit flag, ascending.
    pub fn committed_epochs(&self) -> Result<Vec<u64>, StoreError> {
        let mut out = Vec::new();
        for e in self.list_epochs()? {
            if let Ok(m) = self.load_manifest(e) {
                if m.committed {
                    out.push(e);
                }
            }
        }
        Ok(out)
    }

    pub fn latest_committed(&self) -> Result<Option<u64>, StoreError> {
        Ok(self.committed_epochs()?.last().copied())
    }

    /// Loads a committed epoch with every registered process's snapshot.
    pub fn load_global(&self, epoch: u64) -> Result<GlobalCheckpoint, StoreError> {
        let m = self.load_manifest(epoch).map_err(|e| match e {
            StoreError::Io(_) => StoreError::NotCommitted(epoch),
            other => other,
        })?;
        let mut snapshots = BTreeMap::new();
        for p in &m.processes {
            snapshots.insert(p.clone(), self.load_snapshot(epoch, p)?);
        }
        Ok(GlobalCheckpoint {
            epoch,
            committed: m.committed,
            snapshots,
        })
    }

    pub fn write_registry(&self, processes: &[String]) -> Result<(), StoreError> {
        let r = Registry {
            processes: processes.to_vec(),
        };
        self.write_atomic(&self.root.join("registry.json"), &serde_json::to_string(&r)?)
    }

    pub fn read_registry(&self) -> Result<Vec<String>, StoreError> {
        let path = self.root.join("registry.json");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let raw = fs::read_to_string(path)?;
        let r: Registry = serde_json::from_str(&raw)?;
        Ok(r.processes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(process: &str) -> SnapshotBody {
        SnapshotBody {
            process: process.to_string(),
            app: "fib".to_string(),
            app_state: crate::messaging::to_b64(b"{\"v\":1}"),
            channel_logs: CommsSnapshot::default(),
            unanswered_interests: vec![],
            delivered_not_consumed: vec![],
        }
    }

    #[test]
    fn commit_flag_written_last_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::new(dir.path().join("store")).unwrap();
        store.open_epoch(1, &["p0".into(), "p1".into()]).unwrap();
        store.save_snapshot(1, &body("p0")).unwrap();
        store.save_snapshot(1, &body("p1")).unwrap();
        assert_eq!(store.latest_committed().unwrap(), None);
        store.commit_epoch(1, &["p0".into(), "p1".into()]).unwrap();
        assert_eq!(store.latest_committed().unwrap(), Some(1));

        let g = store.load_global(1).unwrap();
        assert!(g.committed);
        assert_eq!(g.snapshots.len(), 2);
        assert_eq!(g.snapshots["p0"].epoch, 1);
        assert_eq!(g.snapshots["p0"].body, body("p0"));
    }

    #[test]
    fn uncommitted_epochs_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::new(dir.path().join("store")).unwrap();
        store.open_epoch(1, &["p0".into()]).unwrap();
        store.save_snapshot(1, &body("p0")).unwrap();
        store.commit_epoch(1, &["p0".into()]).unwrap();
        store.open_epoch(2, &["p0".into()]).unwrap();
        store.save_snapshot(2, &body("p0")).unwrap();
        // Epoch 2 never commits.
        assert_eq!(store.list_epochs().unwrap(), vec![1, 2]);
        assert_eq!(store.committed_epochs().unwrap(), vec![1]);
        assert_eq!(store.latest_committed().unwrap(), Some(1));
    }

    #[test]
    fn registry_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::new(dir.path().join("store")).unwrap();
        assert!(store.read_registry().unwrap().is_empty());
        store.write_registry(&["a".into(), "b".into()]).unwrap();
        assert_eq!(store.read_registry().unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn missing_snapshot_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::new(dir.path().join("store")).unwrap();
        store.commit_epoch(1, &["ghost".into()]).unwrap();
        assert!(matches!(
            store.load_global(1).unwrap_err(),
            StoreError::MissingSnapshot { .. }
        ));
    }
}
