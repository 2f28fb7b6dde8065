//! Coordinated checkpoint flows over the fabric: suspend/flush/snapshot/
//! commit/resume, drain semantics around in-flight transfers, aborts on
//! crashed peers, and the consistency of every committed cut.

use ccncheck::checkpoint::store::SnapshotStore;
use ccncheck::checkpoint::verify::{check_blocking, verify_consistency};
use ccncheck::coordinator::{Coordinator, TOKEN_INITIATE};
use ccncheck::fabric::{Fabric, Topology};
use ccncheck::names::NamePrefix;
use ccncheck::process::{Process, ProcessConfig};
use ccncheck::scenario::{presets, run_scenario};
use ccncheck::trace::Event;

struct Rig {
    fabric: Fabric,
    store: SnapshotStore,
}

/// Raw processes (no app) plus a coordinator, everything registered.
fn rig(topology: Topology, processes: &[&str], dir: &std::path::Path) -> Rig {
    let store = SnapshotStore::new(dir.join("store")).unwrap();
    let mut fabric = Fabric::new(topology).unwrap();
    fabric.set_store(store.clone());
    let mut coordinator = Coordinator::new("coord", "fib", 1000);
    for n in processes.iter().chain(["coord"].iter()) {
        let prefix = NamePrefix::parse(&format!("/fib/{n}")).unwrap();
        fabric.register_prefix(n, &prefix).unwrap();
    }
    for p in processes {
        coordinator.register(p);
        let config = ProcessConfig {
            coordinator: Some("coord".to_string()),
            ..ProcessConfig::default()
        };
        let proc = Process::new(p, "fib", None, config);
        fabric.attach_handler(p, Box::new(proc)).unwrap();
    }
    let registered: Vec<String> = coordinator.registered().iter().cloned().collect();
    store.write_registry(&registered).unwrap();
    fabric.attach_handler("coord", Box::new(coordinator)).unwrap();
    Rig { fabric, store }
}

fn star(processes: &[&str]) -> Topology {
    let mut nodes: Vec<String> = processes.iter().map(|s| s.to_string()).collect();
    nodes.push("coord".into());
    Topology {
        links: nodes.iter().map(|n| (n.clone(), "r0".into(), 1)).collect(),
        nodes,
        routers: vec!["r0".into()],
        seed: 0,
    }
}

fn send(f: &mut Fabric, from: &str, to: &str, bytes: &[u8]) -> u64 {
    let payload = bytes.to_vec();
    let to = to.to_string();
    f.with_handler_as::<Process, u64>(from, move |p, info, eff| {
        p.send(&to, payload, info.now, eff)
    })
    .unwrap()
}

fn count(f: &Fabric, pred: impl Fn(&Event) -> bool) -> usize {
    f.trace().iter().filter(|r| pred(&r.ev)).count()
}

#[test]
fn quiet_channels_checkpoint_without_flushes() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rig(star(&["n0", "n1", "n2"]), &["n0", "n1", "n2"], dir.path());
    r.fabric.arm_timer("coord", TOKEN_INITIATE, 5);
    r.fabric.run_until(200);

    assert_eq!(count(&r.fabric, |e| matches!(e, Event::FlushSent { .. })), 0);
    assert_eq!(count(&r.fabric, |e| matches!(e, Event::Suspend { .. })), 3);
    assert_eq!(count(&r.fabric, |e| matches!(e, Event::Snapshot { .. })), 3);
    assert_eq!(count(&r.fabric, |e| matches!(e, Event::EpochCommit { .. })), 1);
    assert_eq!(count(&r.fabric, |e| matches!(e, Event::Resume { .. })), 3);
    assert_eq!(r.store.latest_committed().unwrap(), Some(1));

    let g = r.store.load_global(1).unwrap();
    assert_eq!(g.snapshots.len(), 3);
    let report = verify_consistency(&g, r.fabric.trace().records());
    assert!(report.is_consistent(), "{report:?}");
}

#[test]
fn mid_transfer_checkpoint_waits_for_settle_and_records_zero_in_flight() {
    // A sent its RTS, B had not answered yet when the checkpoint hit: the
    // flush ack is delayed until the transfer settles and the snapshot
    // carries the payload as delivered-not-consumed.
    let dir = tempfile::tempdir().unwrap();
    let mut r = rig(star(&["n0", "n1"]), &["n0", "n1"], dir.path());
    send(&mut r.fabric, "n0", "n1", b"tok");
    r.fabric.arm_timer("coord", TOKEN_INITIATE, 1);
    r.fabric.run_until(400);

    assert_eq!(r.store.latest_committed().unwrap(), Some(1));
    let g = r.store.load_global(1).unwrap();
    let report = verify_consistency(&g, r.fabric.trace().records());
    assert!(report.is_consistent(), "{report:?}");

    // The flush was needed (traffic existed) and acked only after delivery.
    assert_eq!(count(&r.fabric, |e| matches!(e, Event::FlushSent { .. })), 1);
    let delivered_t = r
        .fabric
        .trace()
        .iter()
        .find_map(|rec| match &rec.ev {
            Event::PayloadDelivered { node, .. } if node == "n1" => Some(rec.t),
            _ => None,
        })
        .unwrap();
    let acked_t = r
        .fabric
        .trace()
        .iter()
        .find_map(|rec| match &rec.ev {
            Event::FlushAcked { node, .. } if node == "n0" => Some(rec.t),
            _ => None,
        })
        .unwrap();
    assert!(acked_t > delivered_t);

    // The payload crossed before the cut and sits unconsumed in n1's snapshot.
    assert_eq!(g.snapshots["n1"].body.delivered_not_consumed.len(), 1);
    assert!(g.snapshots["n0"].body.unanswered_interests.is_empty());

    // After resume the payload reaches the application layer exactly once.
    let got = r.fabric.deliver_queue("n1");
    assert_eq!(got, vec![("n0".to_string(), b"tok".to_vec())]);
}

#[test]
fn slow_path_payload_amends_the_snapshot_before_commit() {
    // n0 sends over a slow link; n1 snapshots before the transfer is even
    // visible, the payload lands afterward, and the snapshot is re-persisted
    // (amended) before the epoch can commit.
    let topo = Topology {
        nodes: vec!["n0".into(), "n1".into(), "coord".into()],
        routers: vec!["r0".into(), "r1".into()],
        links: vec![
            ("n0".into(), "r0".into(), 1),
            ("r0".into(), "r1".into(), 10),
            ("r1".into(), "n1".into(), 1),
            ("coord".into(), "r1".into(), 1),
        ],
        seed: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut r = rig(topo, &["n0", "n1"], dir.path());
    send(&mut r.fabric, "n0", "n1", b"slow");
    r.fabric.run_until(2);
    r.fabric.arm_timer("coord", TOKEN_INITIATE, 0);
    r.fabric.run_until(400);

    let snaps_n1: Vec<u64> = r
        .fabric
        .trace()
        .iter()
        .filter_map(|rec| match &rec.ev {
            Event::Snapshot { node, .. } if node == "n1" => Some(rec.t),
            _ => None,
        })
        .collect();
    assert_eq!(snaps_n1.len(), 2, "first persist plus the amendment");

    let delivered_t = r
        .fabric
        .trace()
        .iter()
        .find_map(|rec| match &rec.ev {
            Event::PayloadDelivered { node, .. } if node == "n1" => Some(rec.t),
            _ => None,
        })
        .unwrap();
    assert!(snaps_n1[0] < delivered_t && delivered_t <= snaps_n1[1]);

    let commit_t = r
        .fabric
        .trace()
        .iter()
        .find_map(|rec| match &rec.ev {
            Event::EpochCommit { .. } => Some(rec.t),
            _ => None,
        })
        .expect("epoch commits");
    assert!(commit_t > snaps_n1[1], "commit orders after the amendment");

    // The stored snapshot is the amended one and the cut is consistent.
    let g = r.store.load_global(1).unwrap();
    assert_eq!(g.snapshots["n1"].body.delivered_not_consumed.len(), 1);
    let report = verify_consistency(&g, r.fabric.trace().records());
    assert!(report.is_consistent(), "{report:?}");
}

#[test]
fn crashed_peer_during_flush_aborts_the_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rig(star(&["n0", "n1"]), &["n0", "n1"], dir.path());
    send(&mut r.fabric, "n0", "n1", b"doomed");
    r.fabric.run_until(1);
    r.fabric.crash_node("n1").unwrap();
    r.fabric.run_until(5);
    r.fabric.arm_timer("coord", TOKEN_INITIATE, 0);
    r.fabric.run_until(2000);

    assert_eq!(count(&r.fabric, |e| matches!(e, Event::EpochAbort { .. })), 1);
    assert_eq!(count(&r.fabric, |e| matches!(e, Event::EpochCommit { .. })), 0);
    assert_eq!(r.store.latest_committed().unwrap(), None);
    // The surviving process resumed (self-abort or coordinator resume).
    assert!(count(&r.fabric, |e| matches!(e, Event::Resume { node } if node == "n0")) >= 1);
}

#[test]
fn epoch_number_is_reused_after_abort_so_committed_epochs_stay_dense() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rig(star(&["n0", "n1"]), &["n0", "n1"], dir.path());
    send(&mut r.fabric, "n0", "n1", b"x");
    r.fabric.run_until(1);
    r.fabric.crash_node("n1").unwrap();
    r.fabric.run_until(5);
    r.fabric.arm_timer("coord", TOKEN_INITIATE, 0);
    r.fabric.run_until(1500); // aborts

    r.fabric.restart_node("n1").unwrap();
    // Re-registration repopulates FIBs everywhere, including the restarted
    // node's own routes toward its peers (mirrors what restart_all does).
    for n in ["n0", "n1", "coord"] {
        r.fabric
            .register_prefix(n, &NamePrefix::parse(&format!("/fib/{n}")).unwrap())
            .unwrap();
    }
    let config = ProcessConfig {
        coordinator: Some("coord".to_string()),
        ..ProcessConfig::default()
    };
    r.fabric
        .attach_handler("n1", Box::new(Process::new("n1", "fib", None, config)))
        .unwrap();
    r.fabric.arm_timer("coord", TOKEN_INITIATE, 0);
    r.fabric.run_until(3000);

    assert_eq!(r.store.committed_epochs().unwrap(), vec![1]);
    let inits: Vec<u64> = r
        .fabric
        .trace()
        .iter()
        .filter_map(|rec| match &rec.ev {
            Event::CheckpointInit { epoch } => Some(*epoch),
            _ => None,
        })
        .collect();
    assert_eq!(inits, vec![1, 1], "aborted epoch number is retried");
}

#[test]
fn scripted_fibonacci_checkpoint_commits_a_consistent_cut() {
    let dir = tempfile::tempdir().unwrap();
    let s = presets::fib_with_checkpoint(42);
    let artifacts = run_scenario(&s, dir.path()).unwrap();

    let epochs = artifacts.store.committed_epochs().unwrap();
    assert_eq!(epochs, vec![1]);
    let g = artifacts.store.load_global(1).unwrap();
    assert_eq!(g.snapshots.len(), 3);
    let report = verify_consistency(&g, artifacts.trace.records());
    assert!(report.is_consistent(), "{report:?}");
    assert!(check_blocking(artifacts.trace.records()).is_empty());

    // All processes suspended within a bounded window of the initiation.
    let init_t = artifacts
        .trace
        .iter()
        .find_map(|rec| match &rec.ev {
            Event::CheckpointInit { .. } => Some(rec.t),
            _ => None,
        })
        .unwrap();
    let suspend_ts: Vec<u64> = artifacts
        .trace
        .iter()
        .filter_map(|rec| match &rec.ev {
            Event::Suspend { .. } => Some(rec.t),
            _ => None,
        })
        .collect();
    assert_eq!(suspend_ts.len(), 3);
    assert!(suspend_ts.iter().all(|t| *t <= init_t + 10));

    // The pause does not disturb the computation.
    let outputs = artifacts
        .trace
        .iter()
        .filter(|rec| matches!(rec.ev, Event::AppOutput { .. }))
        .count();
    assert_eq!(outputs, 20);
}

#[test]
fn second_epoch_after_restart_commits_consistently() {
    // Checkpoint, crash everything, restart, checkpoint again: the rebuilt
    // coordinator continues the epoch sequence from the store and the second
    // cut is as consistent as the first.
    let dir = tempfile::tempdir().unwrap();
    let mut s = presets::fib_crash_recover(9);
    let restart_at = s.events.last().unwrap().at;
    s.events.push(ccncheck::scenario::ScenarioEvent {
        at: restart_at + 40,
        action: ccncheck::scenario::Action::Checkpoint,
    });
    let artifacts = run_scenario(&s, dir.path()).unwrap();

    assert_eq!(artifacts.store.committed_epochs().unwrap(), vec![1, 2]);
    for epoch in [1, 2] {
        let g = artifacts.store.load_global(epoch).unwrap();
        let report = verify_consistency(&g, artifacts.trace.records());
        assert!(report.is_consistent(), "epoch {epoch}: {report:?}");
    }
    assert!(check_blocking(artifacts.trace.records()).is_empty());

    // The run still converges to the failure-free outputs.
    let oracle_dir = tempfile::tempdir().unwrap();
    let oracle = run_scenario(&s.failure_free(), oracle_dir.path()).unwrap();
    let eq = ccncheck::scenario::check_output_equivalence(&oracle.trace, &artifacts.trace);
    assert!(eq.equal, "{:?}", eq.divergence);
}

#[test]
fn back_to_back_initiations_second_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rig(star(&["n0", "n1"]), &["n0", "n1"], dir.path());
    r.fabric.arm_timer("coord", TOKEN_INITIATE, 0);
    r.fabric.arm_timer("coord", TOKEN_INITIATE, 1);
    r.fabric.run_until(300);
    // Only one epoch ran; the second poke fell into the in-progress window.
    let inits = count(&r.fabric, |e| matches!(e, Event::CheckpointInit { .. }));
    assert_eq!(inits, 1);
    assert_eq!(r.store.committed_epochs().unwrap(), vec![1]);
}
