//! Sender-driven data transfer over the pull-based fabric.
//!
//! A transfer pushes `payload` from sender to receiver in three legs:
//!
//! 1. the sender expresses an RTS interest naming the receiver and itself;
//! 2. the receiver answers the RTS with an empty ack and expresses a CTS
//!    interest back toward the sender (direction reversed);
//! 3. the sender satisfies the CTS with the framed payload, which retraces
//!    the CTS path to the receiver.
//!
//! Payload frames carry `transfer_id | channel_seq | app-bytes` (both counts
//! little-endian 64-bit). Channels are FIFO per (sender, receiver): the
//! receiver delivers in sequence order, buffers early arrivals, and
//! suppresses duplicates, which is also what makes replay after a restart
//! exactly-once.
//!
//! The per-channel send logs and sequence counters recorded here are what the
//! checkpoint layer flushes and snapshots.

use std::collections::{BTreeMap, VecDeque};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::fabric::{Effects, NodeId, ReceivedInterest};
use crate::names::{parse_name, Signal, StructuredName};
use crate::trace::{Event, Layer, Tick};

pub fn to_b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub fn from_b64(s: &str) -> Option<Vec<u8>> {
    B64.decode(s).ok()
}

// ---------------------------------------------------------------------------
// Payload framing
// ---------------------------------------------------------------------------

/// Frames `transfer_id | seq | app-bytes`, lengths little-endian 64-bit.
pub fn encode_frame(transfer: u64, seq: u64, bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + bytes.len());
    out.extend_from_slice(&transfer.to_le_bytes());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(bytes);
    out
}

/// Inverse of [`encode_frame`]; `None` on short input.
pub fn decode_frame(payload: &[u8]) -> Option<(u64, u64, Vec<u8>)> {
    if payload.len() < 16 {
        return None;
    }
    let transfer = u64::from_le_bytes(payload[0..8].try_into().unwrap());
    let seq = u64::from_le_bytes(payload[8..16].try_into().unwrap());
    Some((transfer, seq, payload[16..].to_vec()))
}

// ---------------------------------------------------------------------------
// Transfers and channels
// ---------------------------------------------------------------------------

/// Sender-side transfer state; advances monotonically, `Failed` absorbing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferState {
    RtsSent,
    CtsReceived,
    DataSent,
    Delivered,
    Failed,
}

/// One outgoing transfer owned by its sender.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer {
    pub id: u64,
    pub peer: NodeId,
    pub seq: u64,
    pub payload: Vec<u8>,
    pub layer: Layer,
    pub state: TransferState,
}

/// `(transfer id, name, tick)` record in a channel log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub transfer: u64,
    pub name: String,
    pub tick: Tick,
}

#[derive(Debug, Clone, Default)]
pub struct OutboundChannel {
    /// Sequence the next transfer on this channel will take (first is 1).
    pub next_seq: u64,
    pub entries: Vec<LogEntry>,
    pub last_interest_sent: Option<StructuredName>,
    /// Set by sends, cleared at each snapshot; quiet channels are not flushed.
    pub traffic_since_epoch: bool,
}

#[derive(Debug, Clone)]
pub struct InboundChannel {
    /// Transfers the peer has initiated toward us (RTS arrivals). Under FIFO
    /// forwarding this equals the channel sequence of the peer's last send.
    pub initiated_seen: u64,
    /// Next channel sequence to deliver (first is 1).
    pub next_recv_seq: u64,
    /// Early arrivals buffered until their predecessors deliver.
    reorder: BTreeMap<u64, (u64, Vec<u8>)>,
    /// CTS interests we expressed that have not been answered yet.
    pub pending_cts: u64,
    pub entries: Vec<LogEntry>,
    pub last_interest_sent: Option<StructuredName>,
    pending_flush: Option<PendingFlush>,
}

#[derive(Debug, Clone)]
struct PendingFlush {
    name: StructuredName,
    nonce: u64,
    required_seq: u64,
}

impl Default for InboundChannel {
    fn default() -> Self {
        Self {
            initiated_seen: 0,
            next_recv_seq: 1,
            reorder: BTreeMap::new(),
            pending_cts: 0,
            entries: Vec::new(),
            last_interest_sent: None,
            pending_flush: None,
        }
    }
}

impl InboundChannel {
    pub fn delivered_seq(&self) -> u64 {
        self.next_recv_seq - 1
    }
}

/// A payload delivered in order, not yet consumed by the application layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveredPayload {
    pub from: NodeId,
    pub transfer: u64,
    pub seq: u64,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
struct QueuedSend {
    id: u64,
    peer: NodeId,
    bytes: Vec<u8>,
    layer: Layer,
}

// ---------------------------------------------------------------------------
// Per-node communication handler state
// ---------------------------------------------------------------------------

/// The communication-handler half of a node: transfer state machines, FIFO
/// channel bookkeeping, and flush answering. Invoked only from the fabric's
/// event loop; holds no reference to any other node's state.
#[derive(Debug)]
pub struct CommsState {
    node: NodeId,
    app: String,
    /// Layer attributed to payloads delivered to this node.
    inbound_layer: Layer,
    next_transfer_id: u64,
    outbound: BTreeMap<NodeId, OutboundChannel>,
    inbound: BTreeMap<NodeId, InboundChannel>,
    transfers: BTreeMap<u64, Transfer>,
    delivered: VecDeque<DeliveredPayload>,
    /// Interests expressed and not yet answered or expired, oldest first.
    open_interests: Vec<String>,
    suspended: bool,
    queued: Vec<QueuedSend>,
}

impl CommsState {
    pub fn new(node: &str, app: &str, inbound_layer: Layer) -> Self {
        Self {
            node: node.to_string(),
            app: app.to_string(),
            inbound_layer,
            next_transfer_id: 1,
            outbound: BTreeMap::new(),
            inbound: BTreeMap::new(),
            transfers: BTreeMap::new(),
            delivered: VecDeque::new(),
            open_interests: Vec::new(),
            suspended: false,
            queued: Vec::new(),
        }
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn app(&self) -> &str {
        &self.app
    }

    pub fn is_suspended(&self) -> bool {
        self.suspended
    }

    pub fn transfer(&self, id: u64) -> Option<&Transfer> {
        self.transfers.get(&id)
    }

    pub fn outbound_channel(&self, peer: &str) -> Option<&OutboundChannel> {
        self.outbound.get(peer)
    }

    pub fn inbound_channel(&self, peer: &str) -> Option<&InboundChannel> {
        self.inbound.get(peer)
    }

    pub fn outbound_peers(&self) -> impl Iterator<Item = &NodeId> {
        self.outbound.keys()
    }

    /// Starts a transfer of `bytes` to `peer`. While suspended, application
    /// sends queue and are expressed on resume; checkpoint-layer sends pass.
    pub fn send(
        &mut self,
        peer: &str,
        bytes: Vec<u8>,
        layer: Layer,
        now: Tick,
        eff: &mut Effects,
    ) -> u64 {
        let id = self.next_transfer_id;
        self.next_transfer_id += 1;
        if self.suspended && layer == Layer::App {
            self.queued.push(QueuedSend {
                id,
                peer: peer.to_string(),
                bytes,
                layer,
            });
            return id;
        }
        self.express_transfer(id, peer, bytes, layer, now, eff);
        id
    }

    fn express_transfer(
        &mut self,
        id: u64,
        peer: &str,
        bytes: Vec<u8>,
        layer: Layer,
        now: Tick,
        eff: &mut Effects,
    ) {
        let chan = self.outbound.entry(peer.to_string()).or_insert_with(|| {
            OutboundChannel {
                next_seq: 1,
                ..OutboundChannel::default()
            }
        });
        let seq = chan.next_seq;
        chan.next_seq += 1;
        let rts = StructuredName::rts(&self.app, peer, &self.node);
        chan.entries.push(LogEntry {
            transfer: id,
            name: rts.to_string(),
            tick: now,
        });
        chan.last_interest_sent = Some(rts.clone());
        chan.traffic_since_epoch = true;
        self.transfers.insert(
            id,
            Transfer {
                id,
                peer: peer.to_string(),
                seq,
                payload: bytes,
                layer,
                state: TransferState::RtsSent,
            },
        );
        self.open_interests.push(rts.to_string());
        eff.emit(Event::RtsIssued {
            node: self.node.clone(),
            peer: peer.to_string(),
            transfer: id,
            chan_seq: seq,
            layer,
            name: rts.to_string(),
        });
        eff.express(rts);
    }

    /// Suspends application sends (checkpoint in progress).
    pub fn suspend(&mut self) {
        self.suspended = true;
    }

    /// Resumes and expresses queued application sends in order.
    pub fn release(&mut self, now: Tick, eff: &mut Effects) {
        self.suspended = false;
        let queued = std::mem::take(&mut self.queued);
        for q in queued {
            self.express_transfer(q.id, &q.peer.clone(), q.bytes, q.layer, now, eff);
        }
    }

    /// RTS arrival: answer with an empty ack so PIT state drains, and express
    /// the CTS that the payload data will satisfy.
    pub fn on_rts(&mut self, ri: &ReceivedInterest, eff: &mut Effects) {
        let Some(sender) = ri.name.sender.clone() else {
            return;
        };
        let cts = StructuredName::cts(&self.app, &sender, &self.node);
        let chan = self
            .inbound
            .entry(sender.clone())
            .or_default();
        chan.initiated_seen += 1;
        chan.pending_cts += 1;
        chan.last_interest_sent = Some(cts.clone());
        self.open_interests.push(cts.to_string());
        eff.emit(Event::CtsIssued {
            node: self.node.clone(),
            peer: sender,
            name: cts.to_string(),
        });
        eff.express(cts.clone());
        eff.satisfy(ri.name.clone(), ri.nonce, Vec::new());
    }

    /// CTS arrival at the original sender: satisfy it with the payload frame
    /// of the oldest awaiting transfer, or with stale empty data when no
    /// transfer matches (recovery re-handshakes produce those).
    pub fn on_cts(&mut self, ri: &ReceivedInterest, eff: &mut Effects) {
        let Some(peer) = ri.name.sender.clone() else {
            return;
        };
        let id = self
            .transfers
            .values()
            .filter(|t| t.peer == peer && t.state == TransferState::RtsSent)
            .map(|t| t.id)
            .min();
        match id {
            Some(id) => {
                let t = self.transfers.get_mut(&id).unwrap();
                t.state = TransferState::CtsReceived;
                let frame = encode_frame(t.id, t.seq, &t.payload);
                t.state = TransferState::DataSent;
                eff.emit(Event::PayloadSent {
                    node: self.node.clone(),
                    peer: peer.clone(),
                    transfer: id,
                    chan_seq: t.seq,
                    layer: t.layer,
                });
                eff.satisfy(ri.name.clone(), ri.nonce, frame);
            }
            None => {
                eff.emit(Event::OrphanCts {
                    node: self.node.clone(),
                    name: ri.name.to_string(),
                });
                eff.satisfy(ri.name.clone(), ri.nonce, Vec::new());
            }
        }
    }

    /// Flush request from a peer draining its channel toward us. The flusher
    /// is identified by the sender of the appended last-interest name; we
    /// answer once every transfer it initiated before the flush (which, per
    /// FIFO forwarding, all precede the flush's arrival) has been delivered.
    pub fn on_flush_request(&mut self, ri: &ReceivedInterest, eff: &mut Effects) {
        let flusher = ri
            .name
            .appended
            .as_deref()
            .and_then(|a| parse_name(a).ok())
            .and_then(|n| n.sender);
        let Some(flusher) = flusher else {
            eff.satisfy(ri.name.clone(), ri.nonce, b"ok".to_vec());
            return;
        };
        let chan = self
            .inbound
            .entry(flusher)
            .or_default();
        let required = chan.initiated_seen;
        if chan.delivered_seq() >= required {
            eff.satisfy(ri.name.clone(), ri.nonce, b"ok".to_vec());
        } else {
            chan.pending_flush = Some(PendingFlush {
                name: ri.name.clone(),
                nonce: ri.nonce,
                required_seq: required,
            });
        }
    }

    /// Data arrival for an interest this node expressed. Payload frames are
    /// delivered FIFO per channel into the internal queue; duplicates are
    /// suppressed by channel sequence.
    pub fn on_data(&mut self, name: &StructuredName, payload: &[u8], now: Tick, eff: &mut Effects) {
        self.remove_open(name);
        match name.signal {
            Signal::Cts => self.on_payload(name, payload, now, eff),
            Signal::Rts => {} // ack for one of our RTS interests
            _ => {}
        }
    }

    fn on_payload(&mut self, name: &StructuredName, payload: &[u8], now: Tick, eff: &mut Effects) {
        let from = name.receiver.clone();
        let chan = self
            .inbound
            .entry(from.clone())
            .or_default();
        chan.pending_cts = chan.pending_cts.saturating_sub(1);
        let Some((transfer, seq, bytes)) = decode_frame(payload) else {
            return; // stale empty answer to an orphaned or re-expressed CTS
        };
        if seq < chan.next_recv_seq {
            return; // duplicate after replay, suppressed
        }
        if self.inbound_layer == Layer::Ckpt && seq > chan.next_recv_seq {
            // Control channel into a stateless endpoint: senders keep their
            // sequence counters across the endpoint's restarts, so gaps are
            // expected and nothing is reconstructed behind them.
            chan.next_recv_seq = seq;
        }
        chan.reorder.insert(seq, (transfer, bytes));
        while let Some((tid, bytes)) = chan.reorder.remove(&chan.next_recv_seq) {
            let seq = chan.next_recv_seq;
            chan.next_recv_seq += 1;
            chan.entries.push(LogEntry {
                transfer: tid,
                name: name.to_string(),
                tick: now,
            });
            eff.emit(Event::PayloadDelivered {
                node: self.node.clone(),
                from: from.clone(),
                transfer: tid,
                chan_seq: seq,
                layer: self.inbound_layer,
            });
            self.delivered.push_back(DeliveredPayload {
                from: from.clone(),
                transfer: tid,
                seq,
                bytes,
            });
        }
        if let Some(pf) = &chan.pending_flush {
            if chan.delivered_seq() >= pf.required_seq {
                let pf = chan.pending_flush.take().unwrap();
                eff.satisfy(pf.name, pf.nonce, b"ok".to_vec());
            }
        }
    }

    /// Flush ack received: the peer has delivered everything we initiated on
    /// that channel, so sent transfers toward it are complete.
    pub fn on_flush_ack(&mut self, peer: &str) {
        let done: Vec<u64> = self
            .transfers
            .values()
            .filter(|t| t.peer == peer && t.state == TransferState::DataSent)
            .map(|t| t.id)
            .collect();
        for id in done {
            self.transfers.remove(&id);
        }
    }

    /// Expiry of an interest this node expressed. An expired RTS fails its
    /// transfer (fail-stop peer); the failure is surfaced in the trace.
    pub fn on_expired(&mut self, name: &StructuredName, eff: &mut Effects) {
        self.remove_open(name);
        match name.signal {
            Signal::Rts => {
                let peer = name.receiver.clone();
                let id = self
                    .transfers
                    .values()
                    .filter(|t| t.peer == peer && t.state == TransferState::RtsSent)
                    .map(|t| t.id)
                    .min();
                if let Some(id) = id {
                    let t = self.transfers.get_mut(&id).unwrap();
                    t.state = TransferState::Failed;
                    let layer = t.layer;
                    self.transfers.remove(&id);
                    eff.emit(Event::TransferFailed {
                        node: self.node.clone(),
                        peer,
                        transfer: id,
                        layer,
                    });
                }
            }
            Signal::Cts => {
                let from = name.receiver.clone();
                if let Some(chan) = self.inbound.get_mut(&from) {
                    chan.pending_cts = chan.pending_cts.saturating_sub(1);
                }
            }
            _ => {}
        }
    }

    fn remove_open(&mut self, name: &StructuredName) {
        let s = name.to_string();
        if let Some(idx) = self.open_interests.iter().position(|o| *o == s) {
            self.open_interests.remove(idx);
        }
    }

    /// Drains payloads delivered since the last call, in delivery order.
    pub fn take_delivered(&mut self) -> Vec<DeliveredPayload> {
        self.delivered.drain(..).collect()
    }

    pub fn delivered_len(&self) -> usize {
        self.delivered.len()
    }

    /// Copies the delivered-not-consumed queue without draining it.
    pub fn delivered_snapshot(&self) -> Vec<DeliveredPayload> {
        self.delivered.iter().cloned().collect()
    }

    /// Refills the delivered queue from a restored snapshot.
    pub fn restore_delivered(&mut self, items: Vec<DeliveredPayload>) {
        self.delivered = items.into();
    }

    /// True when every channel is quiet: no transfer mid-handshake, no CTS
    /// outstanding, no gap in delivery, and no unanswered interest of ours.
    pub fn settled(&self) -> bool {
        let outbound_quiet = self
            .transfers
            .values()
            .all(|t| t.state == TransferState::DataSent || t.state == TransferState::Delivered);
        let inbound_quiet = self.inbound.values().all(|c| {
            c.pending_cts == 0 && c.reorder.is_empty() && c.delivered_seq() == c.initiated_seen
        });
        outbound_quiet && inbound_quiet && self.open_interests.is_empty()
    }

    /// Outbound peers with traffic since the last snapshot, with the name of
    /// the last interest sent on each channel (the flush payload).
    pub fn channels_to_flush(&self) -> Vec<(NodeId, StructuredName)> {
        self.outbound
            .iter()
            .filter(|(_, c)| c.traffic_since_epoch)
            .filter_map(|(p, c)| c.last_interest_sent.clone().map(|n| (p.clone(), n)))
            .collect()
    }

    /// Clears per-epoch traffic flags; called when the local snapshot is
    /// taken so the next epoch only flushes channels with new traffic.
    pub fn begin_epoch_interval(&mut self) {
        for c in self.outbound.values_mut() {
            c.traffic_since_epoch = false;
        }
    }

    // -- snapshot / restore --

    pub fn snapshot(&self) -> CommsSnapshot {
        CommsSnapshot {
            next_transfer_id: self.next_transfer_id,
            outbound: self
                .outbound
                .iter()
                .map(|(p, c)| {
                    (
                        p.clone(),
                        OutboundChannelSnapshot {
                            next_seq: c.next_seq,
                            entries: c.entries.clone(),
                            last_interest_sent: c.last_interest_sent.as_ref().map(|n| n.to_string()),
                        },
                    )
                })
                .collect(),
            inbound: self
                .inbound
                .iter()
                .map(|(p, c)| {
                    (
                        p.clone(),
                        InboundChannelSnapshot {
                            initiated_seen: c.initiated_seen,
                            next_recv_seq: c.next_recv_seq,
                            entries: c.entries.clone(),
                            last_interest_sent: c.last_interest_sent.as_ref().map(|n| n.to_string()),
                        },
                    )
                })
                .collect(),
            transfers: self
                .transfers
                .values()
                .map(|t| TransferSnapshot {
                    id: t.id,
                    peer: t.peer.clone(),
                    seq: t.seq,
                    payload: to_b64(&t.payload),
                    layer: t.layer,
                    state: t.state,
                })
                .collect(),
        }
    }

    pub fn restore(
        node: &str,
        app: &str,
        inbound_layer: Layer,
        snap: &CommsSnapshot,
    ) -> CommsState {
        let mut c = CommsState::new(node, app, inbound_layer);
        c.next_transfer_id = snap.next_transfer_id;
        for (p, o) in &snap.outbound {
            c.outbound.insert(
                p.clone(),
                OutboundChannel {
                    next_seq: o.next_seq,
                    entries: o.entries.clone(),
                    last_interest_sent: o
                        .last_interest_sent
                        .as_deref()
                        .and_then(|s| parse_name(s).ok()),
                    traffic_since_epoch: false,
                },
            );
        }
        for (p, i) in &snap.inbound {
            let chan = InboundChannel {
                initiated_seen: i.initiated_seen,
                next_recv_seq: i.next_recv_seq,
                entries: i.entries.clone(),
                last_interest_sent: i
                    .last_interest_sent
                    .as_deref()
                    .and_then(|s| parse_name(s).ok()),
                ..InboundChannel::default()
            };
            c.inbound.insert(p.clone(), chan);
        }
        for t in &snap.transfers {
            c.transfers.insert(
                t.id,
                Transfer {
                    id: t.id,
                    peer: t.peer.clone(),
                    seq: t.seq,
                    payload: from_b64(&t.payload).unwrap_or_default(),
                    layer: t.layer,
                    state: t.state,
                },
            );
        }
        c
    }

    /// Names of interests expressed by this node that are still unanswered.
    pub fn open_interests(&self) -> &[String] {
        &self.open_interests
    }
}

/// Serialized channel and transfer state embedded in a local snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommsSnapshot {
    pub next_transfer_id: u64,
    pub outbound: BTreeMap<String, OutboundChannelSnapshot>,
    pub inbound: BTreeMap<String, InboundChannelSnapshot>,
    pub transfers: Vec<TransferSnapshot>,
}

impl Default for CommsSnapshot {
    fn default() -> Self {
        Self {
            next_transfer_id: 1,
            outbound: BTreeMap::new(),
            inbound: BTreeMap::new(),
            transfers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutboundChannelSnapshot {
    pub next_seq: u64,
    pub entries: Vec<LogEntry>,
    pub last_interest_sent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InboundChannelSnapshot {
    pub initiated_seen: u64,
    pub next_recv_seq: u64,
    pub entries: Vec<LogEntry>,
    pub last_interest_sent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSnapshot {
    pub id: u64,
    pub peer: String,
    pub seq: u64,
    pub payload: String,
    pub layer: Layer,
    pub state: TransferState,
}
