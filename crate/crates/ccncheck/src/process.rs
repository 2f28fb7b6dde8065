//! The per-node protocol stack: communication handler, checkpoint agent,
//! recovery agent, and the attached application.
//!
//! Checkpoint lifecycle on a process, driven by one-way interests:
//!
//! 1. `check` arrives: application sends suspend (new sends queue) and a
//!    flush interest goes out on every outbound channel with traffic since
//!    the last epoch, named with that channel's last interest sent.
//! 2. When every flush is acked, every inbound in-flight transfer has
//!    settled, and no interest of ours is unanswered, channels are drained:
//!    the local snapshot is persisted and a done-report transfer goes to the
//!    coordinator.
//! 3. A payload that still lands after the snapshot (sent before its sender
//!    suspended, over a slower path) is queued unconsumed and the snapshot is
//!    re-persisted once channels re-settle; the sender's flush ack, and
//!    therefore the commit, orders after that amendment.
//! 4. `check/resume` arrives: queued sends release and queued payloads flow
//!    to the application. A suspend that sees neither resume nor commit
//!    within the abort window self-resumes.
//!
//! On restart from a snapshot the process re-registers, discovers its peers
//! via `discover` interests (3 attempts with doubling lifetime, then a retry
//! timer), re-expresses the snapshot's unanswered interests with fresh
//! nonces, and hands queued payloads to the application.

use std::collections::BTreeSet;

use crate::apps::{AppKind, StepEffects};
use crate::checkpoint::store::{LocalSnapshot, QueuedPayload, SnapshotBody};
use crate::fabric::{Effects, HandlerInfo, NodeHandler, NodeId, ReceivedInterest};
use crate::messaging::{from_b64, to_b64, CommsState, DeliveredPayload};
use crate::names::{parse_name, Signal, StructuredName};
use crate::trace::{Event, Layer, Tick};

/// Timer token: the application's step timer.
pub const TOKEN_APP_TICK: u64 = 1;
/// Timer token: checkpoint abort window (self-resume).
pub const TOKEN_ABORT: u64 = 2;
/// Timer token: discovery retry while peers are missing.
pub const TOKEN_DISCOVER_RETRY: u64 = 3;

/// Default abort window: a flush or snapshot not completing within this many
/// ticks abandons the epoch and resumes the process.
pub const DEFAULT_ABORT_WINDOW: Tick = 1000;

#[derive(Debug, Clone)]
pub struct ProcessConfig {
    /// Where snapshot done-reports go; `None` runs the node without a
    /// checkpoint coordinator.
    pub coordinator: Option<NodeId>,
    pub abort_window: Tick,
    /// Base lifetime for discovery probes; doubles per retry attempt.
    pub discover_lifetime: Tick,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        Self {
            coordinator: None,
            abort_window: DEFAULT_ABORT_WINDOW,
            discover_lifetime: crate::fabric::DEFAULT_INTEREST_LIFETIME,
        }
    }
}

/// Payload of the snapshot done-report transfer.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct DoneReport {
    pub process: String,
}

impl DoneReport {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("done report serializes")
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

#[derive(Debug)]
enum CkptPhase {
    Running,
    /// Suspended; waiting for flush acks and channel settle.
    Flushing { outstanding: BTreeSet<NodeId> },
    /// Snapshot persisted and done reported; a late delivery re-persists.
    Persisted { dirty: bool },
}

#[derive(Debug)]
enum RecoveryPhase {
    Idle,
    /// Set at restore; discovery probes go out at boot.
    Pending,
    Discovering {
        missing: BTreeSet<NodeId>,
        attempt: u32,
        outstanding: usize,
    },
}

/// A node of the distributed application.
pub struct Process {
    node: NodeId,
    app_name: String,
    comms: CommsState,
    app: Option<AppKind>,
    phase: CkptPhase,
    recovery: RecoveryPhase,
    pending_reissue: Vec<String>,
    config: ProcessConfig,
}

impl Process {
    pub fn new(node: &str, app_name: &str, app: Option<AppKind>, config: ProcessConfig) -> Self {
        Self {
            node: node.to_string(),
            app_name: app_name.to_string(),
            comms: CommsState::new(node, app_name, Layer::App),
            app,
            phase: CkptPhase::Running,
            recovery: RecoveryPhase::Idle,
            pending_reissue: Vec::new(),
            config,
        }
    }

    /// Rebuilds a process from its committed local snapshot; `pending` is the
    /// restart plan's list of interests to re-express after discovery.
    pub fn from_snapshot(
        snapshot: &LocalSnapshot,
        pending: Vec<String>,
        config: ProcessConfig,
    ) -> Self {
        let body = &snapshot.body;
        let app = from_b64(&body.app_state)
            .filter(|b| !b.is_empty())
            .and_then(|b| AppKind::from_bytes(&b));
        let mut comms =
            CommsState::restore(&body.process, &body.app, Layer::App, &body.channel_logs);
        let queued: Vec<DeliveredPayload> = body
            .delivered_not_consumed
            .iter()
            .map(|q| DeliveredPayload {
                from: q.from.clone(),
                transfer: q.transfer,
                seq: q.seq,
                bytes: from_b64(&q.payload).unwrap_or_default(),
            })
            .collect();
        comms.restore_delivered(queued);
        Self {
            node: body.process.clone(),
            app_name: body.app.clone(),
            comms,
            app,
            phase: CkptPhase::Running,
            recovery: RecoveryPhase::Pending,
            pending_reissue: pending,
            config,
        }
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn comms(&self) -> &CommsState {
        &self.comms
    }

    pub fn app(&self) -> Option<&AppKind> {
        self.app.as_ref()
    }

    pub fn is_suspended(&self) -> bool {
        !matches!(self.phase, CkptPhase::Running)
    }

    pub fn is_recovering(&self) -> bool {
        !matches!(self.recovery, RecoveryPhase::Idle)
    }

    /// Direct send entry point for harness-driven nodes.
    pub fn send(&mut self, peer: &str, bytes: Vec<u8>, now: Tick, eff: &mut Effects) -> u64 {
        self.comms.send(peer, bytes, Layer::App, now, eff)
    }

    fn peer_set(&self) -> BTreeSet<NodeId> {
        match &self.app {
            Some(app) => app.peers().into_iter().collect(),
            None => self
                .comms
                .outbound_peers()
                .filter(|p| Some(p.as_str()) != self.config.coordinator.as_deref())
                .cloned()
                .collect(),
        }
    }

    fn apply_step_effects(&mut self, se: StepEffects, now: Tick, eff: &mut Effects) {
        for (step, value) in se.outputs {
            eff.emit(Event::AppOutput {
                node: self.node.clone(),
                step,
                value,
            });
        }
        for (peer, bytes) in se.sends {
            self.comms.send(&peer, bytes, Layer::App, now, eff);
        }
        if let Some(delay) = se.rearm_timer {
            eff.timer(delay, TOKEN_APP_TICK);
        }
    }

    fn consume_delivered(&mut self, now: Tick, eff: &mut Effects) {
        if self.app.is_none() {
            return; // raw node: payloads stay queued for deliver_queue()
        }
        for p in self.comms.take_delivered() {
            let se = self
                .app
                .as_mut()
                .map(|a| a.on_payload(&p.from, &p.bytes))
                .unwrap_or_default();
            self.apply_step_effects(se, now, eff);
        }
    }

    // -- checkpoint agent --

    fn handle_check(&mut self, now: Tick, eff: &mut Effects) {
        if !matches!(self.phase, CkptPhase::Running) {
            return; // blocking algorithm: one checkpoint at a time
        }
        self.comms.suspend();
        eff.emit(Event::Suspend {
            node: self.node.clone(),
        });
        let mut outstanding = BTreeSet::new();
        for (peer, last) in self.comms.channels_to_flush() {
            let flush = StructuredName::flush(&self.app_name, &peer, &last.to_string());
            eff.emit(Event::FlushSent {
                node: self.node.clone(),
                peer: peer.clone(),
                name: flush.to_string(),
            });
            eff.express(flush);
            outstanding.insert(peer);
        }
        self.phase = CkptPhase::Flushing { outstanding };
        eff.timer(self.config.abort_window, TOKEN_ABORT);
        self.try_drain(now, eff);
    }

    fn try_drain(&mut self, now: Tick, eff: &mut Effects) {
        let drained = match &self.phase {
            CkptPhase::Flushing { outstanding } => {
                outstanding.is_empty() && self.comms.settled()
            }
            _ => false,
        };
        if !drained {
            return;
        }
        self.persist(eff);
        self.phase = CkptPhase::Persisted { dirty: false };
        if let Some(coord) = self.config.coordinator.clone() {
            let report = DoneReport {
                process: self.node.clone(),
            };
            self.comms
                .send(&coord, report.encode(), Layer::Ckpt, now, eff);
        }
    }

    fn persist(&mut self, eff: &mut Effects) {
        let app_state = self
            .app
            .as_ref()
            .map(|a| to_b64(&a.to_bytes()))
            .unwrap_or_default();
        let body = SnapshotBody {
            process: self.node.clone(),
            app: self.app_name.clone(),
            app_state,
            channel_logs: self.comms.snapshot(),
            unanswered_interests: self.comms.open_interests().to_vec(),
            delivered_not_consumed: self
                .comms
                .delivered_snapshot()
                .iter()
                .map(|p| QueuedPayload {
                    from: p.from.clone(),
                    transfer: p.transfer,
                    seq: p.seq,
                    payload: to_b64(&p.bytes),
                })
                .collect(),
        };
        eff.persist(body);
        self.comms.begin_epoch_interval();
    }

    fn handle_resume(&mut self, now: Tick, eff: &mut Effects) {
        if matches!(self.phase, CkptPhase::Running) {
            return; // stale resume after a self-abort
        }
        self.phase = CkptPhase::Running;
        eff.emit(Event::Resume {
            node: self.node.clone(),
        });
        self.comms.release(now, eff);
        if let Some(app) = self.app.as_mut() {
            let se = app.on_resume();
            self.apply_step_effects(se, now, eff);
        }
        self.consume_delivered(now, eff);
    }

    /// Late payload landed after our snapshot: once channels re-settle, the
    /// persisted snapshot is amended to include it.
    fn maybe_repersist(&mut self, eff: &mut Effects) {
        let amend =
            matches!(self.phase, CkptPhase::Persisted { dirty: true }) && self.comms.settled();
        if amend {
            self.phase = CkptPhase::Persisted { dirty: false };
            self.persist(eff);
        }
    }

    // -- recovery agent --

    fn begin_discovery(&mut self, now: Tick, eff: &mut Effects) {
        let peers = self.peer_set();
        if peers.is_empty() {
            self.finish_recovery(now, eff);
            return;
        }
        for peer in &peers {
            self.express_discover(peer, self.config.discover_lifetime, eff);
        }
        self.recovery = RecoveryPhase::Discovering {
            outstanding: peers.len(),
            missing: peers,
            attempt: 1,
        };
    }

    fn express_discover(&mut self, peer: &str, lifetime: Tick, eff: &mut Effects) {
        eff.emit(Event::DiscoverSent {
            node: self.node.clone(),
            peer: peer.to_string(),
        });
        eff.express_with_lifetime(StructuredName::discover(&self.app_name, peer), lifetime);
    }

    fn finish_recovery(&mut self, now: Tick, eff: &mut Effects) {
        self.recovery = RecoveryPhase::Idle;
        for name in std::mem::take(&mut self.pending_reissue) {
            if let Ok(parsed) = parse_name(&name) {
                eff.emit(Event::PendingReissued {
                    node: self.node.clone(),
                    name,
                });
                eff.express(parsed);
            }
        }
        eff.emit(Event::RecoveryComplete {
            node: self.node.clone(),
        });
        if let Some(app) = self.app.as_mut() {
            let se = app.on_resume();
            self.apply_step_effects(se, now, eff);
        }
        self.consume_delivered(now, eff);
    }

    fn discover_answered(&mut self, peer: &str, alive: bool, now: Tick, eff: &mut Effects) {
        enum Next {
            None,
            Finish,
            Retry { shift: u32, peers: Vec<NodeId> },
            Wait,
        }
        let next = {
            let RecoveryPhase::Discovering {
                missing,
                attempt,
                outstanding,
            } = &mut self.recovery
            else {
                return;
            };
            *outstanding = outstanding.saturating_sub(1);
            if alive && missing.remove(peer) {
                eff.emit(Event::DiscoverOk {
                    node: self.node.clone(),
                    peer: peer.to_string(),
                });
            }
            if missing.is_empty() {
                Next::Finish
            } else if *outstanding > 0 {
                Next::None
            } else if *attempt < 3 {
                let shift = *attempt;
                *attempt += 1;
                let peers: Vec<NodeId> = missing.iter().cloned().collect();
                *outstanding = peers.len();
                Next::Retry { shift, peers }
            } else {
                Next::Wait
            }
        };
        match next {
            Next::Finish => self.finish_recovery(now, eff),
            Next::Retry { shift, peers } => {
                let lifetime = self.config.discover_lifetime << shift;
                for p in peers {
                    self.express_discover(&p, lifetime, eff);
                }
            }
            Next::Wait => eff.timer(self.config.discover_lifetime * 8, TOKEN_DISCOVER_RETRY),
            Next::None => {}
        }
    }
}

impl NodeHandler for Process {
    fn on_boot(&mut self, info: HandlerInfo, eff: &mut Effects) {
        if matches!(self.recovery, RecoveryPhase::Pending) {
            self.begin_discovery(info.now, eff);
            return;
        }
        if let Some(app) = self.app.as_mut() {
            let se = app.on_start();
            self.apply_step_effects(se, info.now, eff);
        }
    }

    fn on_interest(&mut self, info: HandlerInfo, ri: &ReceivedInterest, eff: &mut Effects) {
        match ri.name.signal {
            Signal::Rts => {
                self.comms.on_rts(ri, eff);
            }
            Signal::Cts => self.comms.on_cts(ri, eff),
            Signal::Flush => self.comms.on_flush_request(ri, eff),
            Signal::Check => self.handle_check(info.now, eff),
            Signal::Resume => self.handle_resume(info.now, eff),
            Signal::Discover => eff.satisfy(ri.name.clone(), ri.nonce, b"alive".to_vec()),
            Signal::Data => {}
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
            Signal::Flush => {
                let peer = name.receiver.clone();
                eff.emit(Event::FlushAcked {
                    node: self.node.clone(),
                    peer: peer.clone(),
                });
                self.comms.on_flush_ack(&peer);
                if let CkptPhase::Flushing { outstanding } = &mut self.phase {
                    outstanding.remove(&peer);
                }
                self.try_drain(info.now, eff);
            }
            Signal::Discover => {
                let peer = name.receiver.clone();
                self.discover_answered(&peer, true, info.now, eff);
            }
            Signal::Rts | Signal::Cts => {
                let before = self.comms.delivered_len();
                self.comms.on_data(name, payload, info.now, eff);
                let landed = self.comms.delivered_len() > before;
                match &mut self.phase {
                    CkptPhase::Running => {
                        // Mid-recovery payloads wait: the application resumes
                        // only after discovery and pending re-expression.
                        if matches!(self.recovery, RecoveryPhase::Idle) {
                            self.consume_delivered(info.now, eff);
                        }
                    }
                    CkptPhase::Flushing { .. } => self.try_drain(info.now, eff),
                    CkptPhase::Persisted { dirty } => {
                        if landed {
                            *dirty = true;
                        }
                        self.maybe_repersist(eff);
                    }
                }
            }
            _ => {}
        }
    }

    fn on_expired(
        &mut self,
        info: HandlerInfo,
        name: &StructuredName,
        _nonce: u64,
        eff: &mut Effects,
    ) {
        match name.signal {
            Signal::Discover => {
                let peer = name.receiver.clone();
                self.discover_answered(&peer, false, info.now, eff);
            }
            Signal::Flush => {
                // Unacked flush: stay suspended, the abort window decides.
            }
            Signal::Rts | Signal::Cts => {
                self.comms.on_expired(name, eff);
                self.try_drain(info.now, eff);
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, info: HandlerInfo, token: u64, eff: &mut Effects) {
        match token {
            TOKEN_APP_TICK => {
                if matches!(self.phase, CkptPhase::Running) {
                    if let Some(app) = self.app.as_mut() {
                        let se = app.on_timer();
                        self.apply_step_effects(se, info.now, eff);
                    }
                } else if let Some(interval) = self.app.as_ref().and_then(|a| a.tick_interval()) {
                    // Suspended: hold the step, keep the clock ticking.
                    eff.timer(interval, TOKEN_APP_TICK);
                }
            }
            TOKEN_ABORT => {
                if !matches!(self.phase, CkptPhase::Running) {
                    // Epoch wedged (peer crashed mid-flush, coordinator gone):
                    // abandon it and resume; an eventual stale resume is ignored.
                    self.handle_resume(info.now, eff);
                }
            }
            TOKEN_DISCOVER_RETRY => {
                let peers: Vec<NodeId> = match &mut self.recovery {
                    RecoveryPhase::Discovering {
                        missing,
                        outstanding,
                        ..
                    } => {
                        let peers: Vec<NodeId> = missing.iter().cloned().collect();
                        *outstanding = peers.len();
                        peers
                    }
                    _ => Vec::new(),
                };
                let lifetime = self.config.discover_lifetime * 8;
                for p in peers {
                    self.express_discover(&p, lifetime, eff);
                }
            }
            _ => {}
        }
    }

    fn drain_delivered(&mut self) -> Vec<(NodeId, Vec<u8>)> {
        self.comms
            .take_delivered()
            .into_iter()
            .map(|p| (p.from, p.bytes))
            .collect()
    }

    fn as_any(&self) -> Option<&dyn std::any::Any> {
        Some(self)
    }

    fn as_any_mut(&mut self) -> Option<&mut dyn std::any::Any> {
        Some(self)
    }
}
