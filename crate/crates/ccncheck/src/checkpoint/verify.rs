//! Offline consistency checks over a committed global checkpoint and the run
//! trace.
//!
//! A cut is consistent when no snapshot records a receive whose matching send
//! is absent from the sender's snapshot, and when no application payload is
//! mid-channel at any snapshot instant. Both are brute-forced: the snapshot
//! channel logs are cross-matched pairwise, and the trace is scanned around
//! every snapshot event.

use std::collections::{BTreeMap, BTreeSet};

use crate::checkpoint::store::GlobalCheckpoint;
use crate::trace::{Event, Layer, Tick, TraceRecord};

/// Result of verifying one epoch. Empty vectors mean a consistent cut.
#[derive(Debug, Clone, Default)]
pub struct ConsistencyReport {
    pub epoch: u64,
    /// Receives recorded in a snapshot without the matching send in the
    /// sender's snapshot.
    pub orphan_messages: Vec<String>,
    /// Application payloads mid-channel at some snapshot instant.
    pub in_flight_at_snapshot: Vec<String>,
    /// Interests received before the cut but expressed after it.
    pub orphan_interests: Vec<String>,
}

impl ConsistencyReport {
    pub fn is_consistent(&self) -> bool {
        self.orphan_messages.is_empty()
            && self.in_flight_at_snapshot.is_empty()
            && self.orphan_interests.is_empty()
    }

    pub fn violation_count(&self) -> usize {
        self.orphan_messages.len() + self.in_flight_at_snapshot.len() + self.orphan_interests.len()
    }
}

/// Brute-force consistency check of `g` against the trace it was taken from.
pub fn verify_consistency(g: &GlobalCheckpoint, trace: &[TraceRecord]) -> ConsistencyReport {
    let mut report = ConsistencyReport {
        epoch: g.epoch,
        ..Default::default()
    };

    // 1. Snapshot-log orphans: every inbound entry must have a matching
    //    outbound entry (same transfer id) in the sending process's snapshot.
    for (p, snap) in &g.snapshots {
        for (peer, chan) in &snap.body.channel_logs.inbound {
            let Some(peer_snap) = g.snapshots.get(peer) else {
                continue; // channel to a non-checkpointed party (coordinator)
            };
            let sent: BTreeSet<u64> = peer_snap
                .body
                .channel_logs
                .outbound
                .get(p)
                .map(|c| c.entries.iter().map(|e| e.transfer).collect())
                .unwrap_or_default();
            for e in &chan.entries {
                if !sent.contains(&e.transfer) {
                    report.orphan_messages.push(format!(
                        "epoch {}: {p} recorded receipt of transfer {} from {peer} \
                         but {peer}'s snapshot has no matching send",
                        g.epoch, e.transfer
                    ));
                }
            }
        }
    }

    // Snapshot instants: the last snapshot event per process for this epoch
    // (a late in-flight payload re-persists the snapshot it amends).
    let mut snap_tick: BTreeMap<&str, Tick> = BTreeMap::new();
    let mut snap_events: Vec<(&str, Tick)> = Vec::new();
    for r in trace {
        if let Event::Snapshot { node, epoch } = &r.ev {
            if *epoch == g.epoch && g.snapshots.contains_key(node) {
                snap_tick.insert(node.as_str(), r.t);
                snap_events.push((node.as_str(), r.t));
            }
        }
    }

    // Channel activity: application payload sends and deliveries keyed by
    // (sender, receiver, channel seq).
    type ChanKey<'a> = (&'a str, &'a str);
    let mut sent: BTreeMap<ChanKey, Vec<(u64, Tick)>> = BTreeMap::new();
    let mut delivered: BTreeMap<ChanKey, Vec<(u64, Tick)>> = BTreeMap::new();
    let mut rts_tick: BTreeMap<(&str, u64), Tick> = BTreeMap::new();
    let mut delivered_by_id: BTreeMap<(&str, u64), (&str, Tick)> = BTreeMap::new();
    for r in trace {
        match &r.ev {
            Event::PayloadSent {
                node,
                peer,
                chan_seq,
                layer: Layer::App,
                ..
            } => sent
                .entry((node.as_str(), peer.as_str()))
                .or_default()
                .push((*chan_seq, r.t)),
            Event::PayloadDelivered {
                node,
                from,
                chan_seq,
                layer: Layer::App,
                transfer,
            } => {
                delivered
                    .entry((from.as_str(), node.as_str()))
                    .or_default()
                    .push((*chan_seq, r.t));
                delivered_by_id
                    .entry((from.as_str(), *transfer))
                    .or_insert((node.as_str(), r.t));
            }
            Event::RtsIssued {
                node,
                transfer,
                layer: Layer::App,
                ..
            } => {
                rts_tick.entry((node.as_str(), *transfer)).or_insert(r.t);
            }
            _ => {}
        }
    }

    // 2. Zero in-flight application payloads at every snapshot instant, on
    //    every channel touching the snapshotting process.
    for (node, s) in &snap_events {
        for ((from, to), sends) in &sent {
            if from != node && to != node {
                continue;
            }
            let delivered_seqs: BTreeSet<u64> = delivered
                .get(&(*from, *to))
                .map(|v| v.iter().filter(|(_, t)| *t <= *s).map(|(q, _)| *q).collect())
                .unwrap_or_default();
            for (seq, ts) in sends {
                if *ts <= *s && !delivered_seqs.contains(seq) {
                    report.in_flight_at_snapshot.push(format!(
                        "epoch {}: payload seq {seq} on {from}->{to} in flight at \
                         {node}'s snapshot (t={s})",
                        g.epoch
                    ));
                }
            }
        }
    }

    // 3. Trace-level orphan messages: delivered inside the cut, initiated
    //    outside it.
    for ((from, transfer), (to, t_del)) in &delivered_by_id {
        let (Some(s_to), Some(s_from)) = (snap_tick.get(*to), snap_tick.get(*from)) else {
            continue;
        };
        let Some(t_send) = rts_tick.get(&(*from, *transfer)) else {
            continue;
        };
        if *t_del <= *s_to && *t_send > *s_from {
            report.orphan_messages.push(format!(
                "epoch {}: transfer {transfer} delivered to {to} at t={t_del} (inside cut) \
                 but initiated by {from} at t={t_send} (outside cut)",
                g.epoch
            ));
        }
    }

    // 4. Orphan interests between checkpointed processes, paired by nonce.
    let mut interest_sent: BTreeMap<u64, (&str, Tick)> = BTreeMap::new();
    for r in trace {
        match &r.ev {
            Event::InterestSent { node, nonce, .. } => {
                interest_sent.insert(*nonce, (node.as_str(), r.t));
            }
            Event::InterestRecv { node, nonce, name } => {
                let Some((sender, t_sent)) = interest_sent.get(nonce) else {
                    continue;
                };
                let (Some(s_recv), Some(s_send)) =
                    (snap_tick.get(node.as_str()), snap_tick.get(sender))
                else {
                    continue;
                };
                if r.t <= *s_recv && *t_sent > *s_send {
                    report.orphan_interests.push(format!(
                        "epoch {}: interest {name} (nonce {nonce}) received by {node} at \
                         t={} but expressed by {sender} at t={t_sent}",
                        g.epoch, r.t
                    ));
                }
            }
            _ => {}
        }
    }

    report
}

/// Blocking property: no application RTS between a node's suspend and resume.
pub fn check_blocking(trace: &[TraceRecord]) -> Vec<String> {
    let mut suspended: BTreeSet<&str> = BTreeSet::new();
    let mut violations = Vec::new();
    for r in trace {
        match &r.ev {
            Event::Suspend { node } => {
                suspended.insert(node.as_str());
            }
            Event::Resume { node } => {
                suspended.remove(node.as_str());
            }
            Event::Crash { node } => {
                suspended.remove(node.as_str());
            }
            Event::RtsIssued {
                node,
                layer: Layer::App,
                transfer,
                ..
            } if suspended.contains(node.as_str()) => {
                violations.push(format!(
                    "application RTS for transfer {transfer} issued by suspended {node} at t={}",
                    r.t
                ));
            }
            _ => {}
        }
    }
    violations
}

/// Handshake shape for failure-free traces: each delivered transfer shows
/// exactly one RTS, one CTS, and one payload data, in tick order; FIFO holds
/// per channel.
pub fn check_handshake_shape(trace: &[TraceRecord]) -> Vec<String> {
    let mut violations = Vec::new();
    let mut rts: BTreeMap<(&str, u64), Vec<Tick>> = BTreeMap::new();
    let mut payload_sent: BTreeMap<(&str, u64), Vec<Tick>> = BTreeMap::new();
    let mut cts: BTreeMap<(&str, &str), Vec<Tick>> = BTreeMap::new(); // (receiver, sender)
    let mut delivered: Vec<(&str, &str, u64, u64, Tick)> = Vec::new(); // (from, to, tid, seq, t)

    for r in trace {
        match &r.ev {
            Event::RtsIssued {
                node, transfer, ..
            } => rts.entry((node.as_str(), *transfer)).or_default().push(r.t),
            Event::PayloadSent {
                node, transfer, ..
            } => payload_sent
                .entry((node.as_str(), *transfer))
                .or_default()
                .push(r.t),
            Event::CtsIssued { node, peer, .. } => cts
                .entry((node.as_str(), peer.as_str()))
                .or_default()
                .push(r.t),
            Event::PayloadDelivered {
                node,
                from,
                transfer,
                chan_seq,
                ..
            } => delivered.push((from.as_str(), node.as_str(), *transfer, *chan_seq, r.t)),
            _ => {}
        }
    }

    let mut last_seq: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    for (from, to, tid, seq, t_del) in &delivered {
        let key = (*from, *tid);
        let rts_ticks = rts.get(&key).cloned().unwrap_or_default();
        let sent_ticks = payload_sent.get(&key).cloned().unwrap_or_default();
        if rts_ticks.len() != 1 {
            violations.push(format!(
                "transfer {tid} from {from}: {} RTS events, expected exactly 1",
                rts_ticks.len()
            ));
            continue;
        }
        if sent_ticks.len() != 1 {
            violations.push(format!(
                "transfer {tid} from {from}: {} payload sends, expected exactly 1",
                sent_ticks.len()
            ));
            continue;
        }
        // The seq-th CTS issued by the receiver toward the sender belongs to
        // this transfer (FIFO channel pairing).
        let cts_ticks = cts.get(&(*to, *from)).cloned().unwrap_or_default();
        let Some(t_cts) = cts_ticks.get((*seq - 1) as usize).copied() else {
            violations.push(format!(
                "transfer {tid} from {from}: no CTS issued by {to} for channel seq {seq}"
            ));
            continue;
        };
        let t_rts = rts_ticks[0];
        let t_sent = sent_ticks[0];
        if !(t_rts < t_cts && t_cts < t_sent && t_sent < *t_del) {
            violations.push(format!(
                "transfer {tid} from {from}: tick order violated \
                 (rts={t_rts}, cts={t_cts}, data={t_sent}, delivered={t_del})"
            ));
        }
        let prev = last_seq.insert((*from, *to), *seq);
        if let Some(prev) = prev {
            if *seq != prev + 1 {
                violations.push(format!(
                    "channel {from}->{to}: delivered seq {seq} after {prev}, FIFO violated"
                ));
            }
        } else if *seq != 1 {
            violations.push(format!(
                "channel {from}->{to}: first delivered seq is {seq}, expected 1"
            ));
        }
    }
    violations
}
