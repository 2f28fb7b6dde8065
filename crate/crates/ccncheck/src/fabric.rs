//! Deterministic discrete-event simulation of a content centric network.
//!
//! Vertices are either nodes (endpoints running a [`NodeHandler`]) or routers.
//! Interests are forwarded hop-by-hop by longest-prefix FIB match, leaving a
//! PIT breadcrumb per traversed router; data retraces the breadcrumbs,
//! consuming exactly one entry per hop. Routers never cache interests: each
//! received interest is forwarded at most once per nonce and held only in the
//! PIT.
//!
//! Faults follow the fail-stop model: a crashed vertex stops executing and
//! loses all volatile state (FIB, PIT, pending interests, handler memory);
//! packets in flight toward it are dropped on arrival, even if it restarted
//! in the meantime. FIB registrations do not auto-restore on restart.
//!
//! The event queue is processed in `(time, sequence)` order, so identical
//! `(topology, seed, scenario)` inputs produce byte-identical traces.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::store::{SnapshotBody, SnapshotStore};
use crate::names::{NamePrefix, StructuredName};
use crate::trace::{Event, Tick, Trace};

/// Vertex identifier (node or router).
pub type NodeId = String;

/// Default interest lifetime in ticks; an unanswered interest expires after
/// this window and its PIT breadcrumbs are garbage collected.
pub const DEFAULT_INTEREST_LIFETIME: Tick = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("unknown vertex {0:?}")]
    UnknownNode(NodeId),
    #[error("vertex {0:?} is crashed")]
    NodeDown(NodeId),
    #[error("vertex {0:?} is already alive")]
    NodeUp(NodeId),
    #[error("prefix {prefix} already registered by {owner:?}")]
    PrefixConflict { prefix: NamePrefix, owner: NodeId },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("invalid topology: {0}")]
    BadTopology(String),
    #[error("simulation exceeded {0} events without quiescing")]
    RunawaySimulation(u64),
}

// ---------------------------------------------------------------------------
// Packets and tables
// ---------------------------------------------------------------------------

/// An interest packet. Nonces are unique per expressed interest within a run
/// and suppress forwarding loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interest {
    pub name: StructuredName,
    pub nonce: u64,
    pub issue_time: Tick,
    pub lifetime: Tick,
}

/// A data packet; the name echoes the interest it satisfies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Data {
    pub name: StructuredName,
    pub payload: Vec<u8>,
    pub origin: NodeId,
}

/// Forwarding entry: one next hop per (vertex, prefix).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FibEntry {
    pub prefix: NamePrefix,
    pub next_hop: NodeId,
}

/// Pending-interest breadcrumb left at a router; consumed by the first
/// matching data packet and never surviving the router's crash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PitEntry {
    pub name: StructuredName,
    pub in_face: NodeId,
    pub nonce: u64,
    pub created: Tick,
    pub lifetime: Tick,
}

/// An interest delivered to its prefix owner, not yet satisfied.
#[derive(Debug, Clone)]
pub struct ReceivedInterest {
    pub name: StructuredName,
    pub nonce: u64,
    pub from: NodeId,
    pub at: Tick,
}

/// Observable state of an expressed interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleState {
    Pending,
    Satisfied,
    Expired,
}

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

/// Static network shape: endpoints, routers, and weighted links.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<NodeId>,
    pub routers: Vec<NodeId>,
    /// `(endpoint, endpoint, latency ticks)`, undirected.
    pub links: Vec<(NodeId, NodeId, Tick)>,
    #[serde(default)]
    pub seed: u64,
}

impl Topology {
    pub fn validate(&self) -> Result<(), FabricError> {
        let mut ids = BTreeSet::new();
        for id in self.nodes.iter().chain(&self.routers) {
            if !ids.insert(id.clone()) {
                return Err(FabricError::BadTopology(format!("duplicate vertex {id:?}")));
            }
        }
        if ids.is_empty() {
            return Err(FabricError::BadTopology("no vertices".into()));
        }
        for (a, b, lat) in &self.links {
            if !ids.contains(a) || !ids.contains(b) {
                return Err(FabricError::BadTopology(format!(
                    "link {a:?}-{b:?} references unknown vertex"
                )));
            }
            if *lat < 1 {
                return Err(FabricError::BadTopology(format!(
                    "link {a:?}-{b:?} has latency {lat}, minimum is 1"
                )));
            }
        }
        // Connectivity over the participating vertices.
        let mut adj: BTreeMap<&NodeId, Vec<&NodeId>> = BTreeMap::new();
        for (a, b, _) in &self.links {
            adj.entry(a).or_default().push(b);
            adj.entry(b).or_default().push(a);
        }
        let start = ids.iter().next().unwrap();
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            if seen.insert(v.clone()) {
                if let Some(ns) = adj.get(v) {
                    stack.extend(ns.iter().copied());
                }
            }
        }
        if seen.len() != ids.len() && ids.len() > 1 {
            return Err(FabricError::BadTopology("graph is not connected".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Node handlers
// ---------------------------------------------------------------------------

/// Snapshot of local context passed to handler callbacks. Handlers see only
/// their own state, incoming packets, and this local clock reading; there is
/// no accessor for any other vertex.
#[derive(Debug, Clone, Copy)]
pub struct HandlerInfo {
    pub now: Tick,
}

/// Commands a handler may issue; applied by the fabric after the callback
/// returns, in order.
#[derive(Debug)]
pub enum Command {
    /// Express an interest from this node; `None` lifetime uses the default.
    Express {
        name: StructuredName,
        lifetime: Option<Tick>,
    },
    /// Satisfy a previously received interest (identified by nonce) with data.
    Satisfy {
        name: StructuredName,
        nonce: u64,
        payload: Vec<u8>,
    },
    /// Arm a one-shot timer delivered back via `on_timer`.
    Timer { delay: Tick, token: u64 },
    /// Record a protocol or application event in the trace.
    Emit(Event),
    /// Persist this node's local snapshot into the open checkpoint epoch.
    Persist(Box<SnapshotBody>),
    /// Coordinator: open an epoch directory (manifest written uncommitted).
    OpenEpoch { epoch: u64, processes: Vec<NodeId> },
    /// Coordinator: mark the epoch committed (flag rewritten atomically, last).
    CommitEpoch { epoch: u64, processes: Vec<NodeId> },
    /// Coordinator: clear the open epoch after an abort.
    AbortEpoch { epoch: u64 },
}

/// Sink for handler commands.
#[derive(Debug, Default)]
pub struct Effects {
    commands: Vec<Command>,
}

impl Effects {
    pub fn express(&mut self, name: StructuredName) {
        self.commands.push(Command::Express {
            name,
            lifetime: None,
        });
    }

    pub fn express_with_lifetime(&mut self, name: StructuredName, lifetime: Tick) {
        self.commands.push(Command::Express {
            name,
            lifetime: Some(lifetime),
        });
    }

    pub fn satisfy(&mut self, name: StructuredName, nonce: u64, payload: Vec<u8>) {
        self.commands.push(Command::Satisfy {
            name,
            nonce,
            payload,
        });
    }

    pub fn timer(&mut self, delay: Tick, token: u64) {
        self.commands.push(Command::Timer { delay, token });
    }

    pub fn emit(&mut self, ev: Event) {
        self.commands.push(Command::Emit(ev));
    }

    pub fn persist(&mut self, body: SnapshotBody) {
        self.commands.push(Command::Persist(Box::new(body)));
    }

    pub fn push(&mut self, cmd: Command) {
        self.commands.push(cmd);
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn commands(&self) -> &[Command] {
        &self.commands
    }
}

/// Per-node protocol logic, driven from the fabric's event loop. All state a
/// handler owns is volatile: it is discarded when the node crashes.
pub trait NodeHandler {
    /// Called once when the handler is attached to an alive node.
    fn on_boot(&mut self, _info: HandlerInfo, _eff: &mut Effects) {}
    /// An interest under one of this node's prefixes arrived.
    fn on_interest(&mut self, _info: HandlerInfo, _ri: &ReceivedInterest, _eff: &mut Effects) {}
    /// Data satisfying an interest this node expressed arrived.
    fn on_data(
        &mut self,
        _info: HandlerInfo,
        _name: &StructuredName,
        _nonce: u64,
        _payload: &[u8],
        _eff: &mut Effects,
    ) {
    }
    /// An interest this node expressed went unanswered past its lifetime.
    fn on_expired(
        &mut self,
        _info: HandlerInfo,
        _name: &StructuredName,
        _nonce: u64,
        _eff: &mut Effects,
    ) {
    }
    /// A timer armed via [`Effects::timer`] fired.
    fn on_timer(&mut self, _info: HandlerInfo, _token: u64, _eff: &mut Effects) {}
    /// Drains application payloads delivered since the last call.
    fn drain_delivered(&mut self) -> Vec<(NodeId, Vec<u8>)> {
        Vec::new()
    }
    /// Downcast hooks so the driver can reach a concrete handler.
    fn as_any(&self) -> Option<&dyn std::any::Any> {
        None
    }
    fn as_any_mut(&mut self) -> Option<&mut dyn std::any::Any> {
        None
    }
}

// ---------------------------------------------------------------------------
// Event queue
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum EventKind {
    InterestHop {
        to: NodeId,
        from: NodeId,
        interest: Interest,
        target_inc: u64,
    },
    DataHop {
        to: NodeId,
        from: NodeId,
        data: Data,
        target_inc: u64,
    },
    HandleExpiry {
        node: NodeId,
        handle: u64,
    },
    Timer {
        node: NodeId,
        token: u64,
        target_inc: u64,
    },
}

#[derive(Debug)]
struct Scheduled {
    at: Tick,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct Pending {
    handle: u64,
    interest: Interest,
}

struct Vertex {
    is_router: bool,
    alive: bool,
    incarnation: u64,
    neighbors: BTreeMap<NodeId, Tick>,
    fib: Vec<FibEntry>,
    pit: Vec<PitEntry>,
    seen_nonces: BTreeSet<u64>,
    pending: Vec<Pending>,
    received: Vec<ReceivedInterest>,
}

impl Vertex {
    fn clear_volatile(&mut self) {
        self.fib.clear();
        self.pit.clear();
        self.seen_nonces.clear();
        self.pending.clear();
        self.received.clear();
    }
}

// ---------------------------------------------------------------------------
// Fabric
// ---------------------------------------------------------------------------

/// The simulated network plus the event loop driving it. Exclusively owned
/// by its driver; node handlers run sequentially in event order.
pub struct Fabric {
    topology: Topology,
    now: Tick,
    next_event_seq: u64,
    next_trace_seq: u64,
    next_nonce: u64,
    next_handle: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    vertices: BTreeMap<NodeId, Vertex>,
    handlers: BTreeMap<NodeId, Box<dyn NodeHandler>>,
    prefix_owner: BTreeMap<NamePrefix, NodeId>,
    handles: BTreeMap<u64, HandleState>,
    trace: Trace,
    store: Option<SnapshotStore>,
    open_epoch: Option<u64>,
    drops: u64,
    default_lifetime: Tick,
}

impl Fabric {
    pub fn new(topology: Topology) -> Result<Self, FabricError> {
        topology.validate()?;
        let mut vertices = BTreeMap::new();
        for (id, is_router) in topology
            .nodes
            .iter()
            .map(|n| (n, false))
            .chain(topology.routers.iter().map(|r| (r, true)))
        {
            vertices.insert(
                id.clone(),
                Vertex {
                    is_router,
                    alive: true,
                    incarnation: 0,
                    neighbors: BTreeMap::new(),
                    fib: Vec::new(),
                    pit: Vec::new(),
                    seen_nonces: BTreeSet::new(),
                    pending: Vec::new(),
                    received: Vec::new(),
                },
            );
        }
        for (a, b, lat) in &topology.links {
            vertices
                .get_mut(a)
                .unwrap()
                .neighbors
                .insert(b.clone(), *lat);
            vertices
                .get_mut(b)
                .unwrap()
                .neighbors
                .insert(a.clone(), *lat);
        }
        Ok(Self {
            topology,
            now: 0,
            next_event_seq: 0,
            next_trace_seq: 0,
            next_nonce: 1,
            next_handle: 1,
            queue: BinaryHeap::new(),
            vertices,
            handlers: BTreeMap::new(),
            prefix_owner: BTreeMap::new(),
            handles: BTreeMap::new(),
            trace: Trace::new(),
            store: None,
            open_epoch: None,
            drops: 0,
            default_lifetime: DEFAULT_INTEREST_LIFETIME,
        })
    }

    pub fn set_store(&mut self, store: SnapshotStore) {
        self.store = Some(store);
    }

    pub fn store(&self) -> Option<&SnapshotStore> {
        self.store.as_ref()
    }

    pub fn set_default_lifetime(&mut self, t: Tick) {
        self.default_lifetime = t;
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn dropped_count(&self) -> u64 {
        self.drops
    }

    pub fn node_alive(&self, node: &str) -> bool {
        self.vertices.get(node).map(|v| v.alive).unwrap_or(false)
    }

    pub fn is_router(&self, node: &str) -> bool {
        self.vertices
            .get(node)
            .map(|v| v.is_router)
            .unwrap_or(false)
    }

    pub fn pit_len(&self, node: &str) -> usize {
        self.vertices.get(node).map(|v| v.pit.len()).unwrap_or(0)
    }

    pub fn handle_state(&self, handle: u64) -> Option<HandleState> {
        self.handles.get(&handle).copied()
    }

    pub fn prefix_owner(&self, prefix: &NamePrefix) -> Option<&NodeId> {
        self.prefix_owner.get(prefix)
    }

    pub fn has_handler(&self, node: &str) -> bool {
        self.handlers.contains_key(node)
    }

    fn trace_event(&mut self, ev: Event) {
        let seq = self.next_trace_seq;
        self.next_trace_seq += 1;
        self.trace.push(self.now, seq, ev);
    }

    fn schedule(&mut self, at: Tick, kind: EventKind) {
        let seq = self.next_event_seq;
        self.next_event_seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq, kind }));
    }

    fn vertex(&self, node: &str) -> Result<&Vertex, FabricError> {
        self.vertices
            .get(node)
            .ok_or_else(|| FabricError::UnknownNode(node.to_string()))
    }

    fn alive_vertex(&self, node: &str) -> Result<&Vertex, FabricError> {
        let v = self.vertex(node)?;
        if !v.alive {
            return Err(FabricError::NodeDown(node.to_string()));
        }
        Ok(v)
    }

    // -- handler management --

    /// Attaches a handler to an alive node and runs its boot callback.
    pub fn attach_handler(
        &mut self,
        node: &str,
        handler: Box<dyn NodeHandler>,
    ) -> Result<(), FabricError> {
        self.alive_vertex(node)?;
        self.handlers.insert(node.to_string(), handler);
        self.invoke(node, |h, info, eff| h.on_boot(info, eff));
        Ok(())
    }

    /// Drains payloads delivered to this node's handler since the last call.
    pub fn deliver_queue(&mut self, node: &str) -> Vec<(NodeId, Vec<u8>)> {
        self.handlers
            .get_mut(node)
            .map(|h| h.drain_delivered())
            .unwrap_or_default()
    }

    /// Read-only view of a concrete handler, when attached and of type `T`.
    pub fn handler_as<T: 'static>(&self, node: &str) -> Option<&T> {
        self.handlers
            .get(node)
            .and_then(|h| h.as_any())
            .and_then(|a| a.downcast_ref::<T>())
    }

    /// Drives a concrete handler from the harness (e.g. triggering a send);
    /// the handler's effects apply exactly as if the event loop invoked it.
    pub fn with_handler_as<T: 'static, R>(
        &mut self,
        node: &str,
        f: impl FnOnce(&mut T, HandlerInfo, &mut Effects) -> R,
    ) -> Option<R> {
        let mut h = self.handlers.remove(node)?;
        let mut eff = Effects::default();
        let info = HandlerInfo { now: self.now };
        let out = h
            .as_any_mut()
            .and_then(|a| a.downcast_mut::<T>())
            .map(|t| f(t, info, &mut eff));
        self.handlers.insert(node.to_string(), h);
        if out.is_some() {
            self.apply_effects(node, eff);
        }
        out
    }

    fn invoke<F>(&mut self, node: &str, f: F)
    where
        F: FnOnce(&mut dyn NodeHandler, HandlerInfo, &mut Effects),
    {
        let Some(mut handler) = self.handlers.remove(node) else {
            return;
        };
        let mut eff = Effects::default();
        f(handler.as_mut(), HandlerInfo { now: self.now }, &mut eff);
        self.handlers.insert(node.to_string(), handler);
        self.apply_effects(node, eff);
    }

    fn apply_effects(&mut self, node: &str, eff: Effects) {
        for cmd in eff.commands {
            match cmd {
                Command::Express { name, lifetime } => {
                    let lt = lifetime.unwrap_or(self.default_lifetime);
                    let _ = self.express_with_lifetime(node, name, lt);
                }
                Command::Satisfy {
                    name,
                    nonce,
                    payload,
                } => {
                    let _ = self.satisfy_by_nonce(node, &name, nonce, payload);
                }
                Command::Timer { delay, token } => {
                    self.arm_timer(node, token, delay);
                }
                Command::Emit(ev) => self.trace_event(ev),
                Command::Persist(body) => self.persist_snapshot(node, *body),
                Command::OpenEpoch { epoch, processes } => {
                    if let Some(store) = &self.store {
                        store
                            .open_epoch(epoch, &processes)
                            .expect("snapshot store writable");
                    }
                    self.open_epoch = Some(epoch);
                }
                Command::CommitEpoch { epoch, processes } => {
                    if let Some(store) = &self.store {
                        store
                            .commit_epoch(epoch, &processes)
                            .expect("snapshot store writable");
                    }
                    self.open_epoch = None;
                    self.trace_event(Event::EpochCommit { epoch });
                }
                Command::AbortEpoch { epoch } => {
                    if self.open_epoch == Some(epoch) {
                        self.open_epoch = None;
                    }
                }
            }
        }
    }

    fn persist_snapshot(&mut self, node: &str, body: SnapshotBody) {
        // Epoch attribution lives with the store: the coordinator opened the
        // epoch, processes dump their state into it. A persist that races an
        // abort finds no open epoch and is dropped.
        let Some(epoch) = self.open_epoch else {
            return;
        };
        if let Some(store) = &self.store {
            store
                .save_snapshot(epoch, &body)
                .expect("snapshot store writable");
        }
        self.trace_event(Event::Snapshot {
            node: node.to_string(),
            epoch,
        });
    }

    /// Schedules a one-shot timer for a node (also the hook scenario drivers
    /// use to poke handlers at scripted ticks).
    pub fn arm_timer(&mut self, node: &str, token: u64, delay: Tick) {
        let Some(v) = self.vertices.get(node) else {
            return;
        };
        let inc = v.incarnation;
        self.schedule(
            self.now + delay,
            EventKind::Timer {
                node: node.to_string(),
                token,
                target_inc: inc,
            },
        );
    }

    // -- prefix registration --

    /// Installs FIB entries along shortest paths so any interest under
    /// `prefix` reaches `node`. Re-registration by the same owner is a no-op;
    /// a different claimant gets a conflict error.
    pub fn register_prefix(&mut self, node: &str, prefix: &NamePrefix) -> Result<(), FabricError> {
        self.alive_vertex(node)?;
        match self.prefix_owner.get(prefix) {
            Some(owner) if owner != node => {
                return Err(FabricError::PrefixConflict {
                    prefix: prefix.clone(),
                    owner: owner.clone(),
                })
            }
            _ => {}
        }
        self.prefix_owner
            .insert(prefix.clone(), node.to_string());

        // Deterministic Dijkstra rooted at the owner over alive vertices;
        // parent(v) is v's next hop toward the owner.
        let mut dist: BTreeMap<NodeId, Tick> = BTreeMap::new();
        let mut parent: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let mut heap: BinaryHeap<Reverse<(Tick, NodeId)>> = BinaryHeap::new();
        dist.insert(node.to_string(), 0);
        heap.push(Reverse((0, node.to_string())));
        while let Some(Reverse((d, v))) = heap.pop() {
            if dist.get(&v).copied() != Some(d) {
                continue;
            }
            let neighbors: Vec<(NodeId, Tick)> = self.vertices[&v]
                .neighbors
                .iter()
                .map(|(n, l)| (n.clone(), *l))
                .collect();
            for (n, lat) in neighbors {
                if !self.vertices[&n].alive {
                    continue;
                }
                let nd = d + lat;
                let better = match dist.get(&n) {
                    None => true,
                    Some(&old) => nd < old || (nd == old && v < parent[&n]),
                };
                if better {
                    dist.insert(n.clone(), nd);
                    parent.insert(n.clone(), v.clone());
                    heap.push(Reverse((nd, n)));
                }
            }
        }
        for (v, next_hop) in parent {
            let vertex = self.vertices.get_mut(&v).unwrap();
            let entry = FibEntry {
                prefix: prefix.clone(),
                next_hop: next_hop.clone(),
            };
            match vertex.fib.iter_mut().find(|e| e.prefix == *prefix) {
                Some(existing) if *existing == entry => continue,
                Some(existing) => *existing = entry,
                None => vertex.fib.push(entry),
            }
            self.trace_event(Event::FibAdd {
                node: v,
                prefix: prefix.to_string(),
                next_hop,
            });
        }
        Ok(())
    }

    /// Re-runs route installation for every registered prefix whose owner is
    /// alive; drivers call this after bringing a vertex back so it regains
    /// paths toward prefixes announced while it was down.
    pub fn refresh_routes(&mut self) {
        let owned: Vec<(NamePrefix, NodeId)> = self
            .prefix_owner
            .iter()
            .map(|(p, o)| (p.clone(), o.clone()))
            .collect();
        for (prefix, owner) in owned {
            if self.node_alive(&owner) {
                let _ = self.register_prefix(&owner, &prefix);
            }
        }
    }

    // -- expressing and satisfying --

    /// Expresses an interest from `node`; returns an observable handle.
    pub fn express_interest(
        &mut self,
        node: &str,
        name: StructuredName,
    ) -> Result<u64, FabricError> {
        self.express_with_lifetime(node, name, self.default_lifetime)
    }

    pub fn express_with_lifetime(
        &mut self,
        node: &str,
        name: StructuredName,
        lifetime: Tick,
    ) -> Result<u64, FabricError> {
        self.alive_vertex(node)?;
        let nonce = self.next_nonce;
        self.next_nonce += 1;
        let handle = self.next_handle;
        self.next_handle += 1;
        let interest = Interest {
            name: name.clone(),
            nonce,
            issue_time: self.now,
            lifetime,
        };
        self.handles.insert(handle, HandleState::Pending);
        self.trace_event(Event::InterestSent {
            node: node.to_string(),
            name: name.to_string(),
            nonce,
        });
        self.vertices.get_mut(node).unwrap().pending.push(Pending {
            handle,
            interest: interest.clone(),
        });
        self.schedule(
            self.now + lifetime,
            EventKind::HandleExpiry {
                node: node.to_string(),
                handle,
            },
        );
        self.route_interest(node, interest);
        Ok(handle)
    }

    /// First-hop routing from the issuing endpoint.
    fn route_interest(&mut self, node: &str, interest: Interest) {
        if self
            .owner_of(&interest.name)
            .map(|o| o == node)
            .unwrap_or(false)
        {
            // Issuer owns the prefix: deliver to self on the next event.
            let inc = self.vertices[node].incarnation;
            self.schedule(
                self.now,
                EventKind::InterestHop {
                    to: node.to_string(),
                    from: node.to_string(),
                    interest,
                    target_inc: inc,
                },
            );
            return;
        }
        let Some(next) = self.longest_prefix_next_hop(node, &interest.name) else {
            return; // no route; the handle expires after its lifetime
        };
        let lat = self.vertices[node].neighbors[&next];
        let inc = self.vertices[&next].incarnation;
        self.schedule(
            self.now + lat,
            EventKind::InterestHop {
                to: next,
                from: node.to_string(),
                interest,
                target_inc: inc,
            },
        );
    }

    fn owner_of(&self, name: &StructuredName) -> Option<&NodeId> {
        self.prefix_owner
            .iter()
            .filter(|(p, _)| p.matches(name))
            .max_by_key(|(p, _)| p.len())
            .map(|(_, o)| o)
    }

    fn longest_prefix_next_hop(&self, vertex: &str, name: &StructuredName) -> Option<NodeId> {
        self.vertices[vertex]
            .fib
            .iter()
            .filter(|e| e.prefix.matches(name))
            .max_by_key(|e| e.prefix.len())
            .map(|e| e.next_hop.clone())
    }

    /// Satisfies the oldest received, unsatisfied interest with this name.
    pub fn satisfy_interest(
        &mut self,
        node: &str,
        name: &StructuredName,
        payload: Vec<u8>,
    ) -> Result<(), FabricError> {
        self.alive_vertex(node)?;
        let nonce = self.vertices[node]
            .received
            .iter()
            .find(|r| r.name == *name)
            .map(|r| r.nonce)
            .ok_or_else(|| {
                FabricError::ProtocolViolation(format!(
                    "{node:?} has no received unsatisfied interest named {name}"
                ))
            })?;
        self.satisfy_by_nonce(node, name, nonce, payload)
    }

    fn satisfy_by_nonce(
        &mut self,
        node: &str,
        name: &StructuredName,
        nonce: u64,
        payload: Vec<u8>,
    ) -> Result<(), FabricError> {
        let v = self.vertices.get_mut(node).unwrap();
        let idx = v
            .received
            .iter()
            .position(|r| r.nonce == nonce && r.name == *name)
            .ok_or_else(|| {
                FabricError::ProtocolViolation(format!(
                    "{node:?} has no received unsatisfied interest named {name}"
                ))
            })?;
        let ri = v.received.remove(idx);
        self.trace_event(Event::DataSent {
            node: node.to_string(),
            name: name.to_string(),
        });
        let data = Data {
            name: name.clone(),
            payload,
            origin: node.to_string(),
        };
        let (at, inc) = if ri.from == node {
            (self.now, self.vertices[node].incarnation)
        } else {
            let lat = self.vertices[node].neighbors[&ri.from];
            (self.now + lat, self.vertices[&ri.from].incarnation)
        };
        self.schedule(
            at,
            EventKind::DataHop {
                to: ri.from,
                from: node.to_string(),
                data,
                target_inc: inc,
            },
        );
        Ok(())
    }

    // -- faults --

    /// Fail-stop crash: the vertex halts and all volatile state is discarded.
    /// Crashing an already-crashed vertex is a no-op.
    pub fn crash_node(&mut self, node: &str) -> Result<(), FabricError> {
        let v = self
            .vertices
            .get_mut(node)
            .ok_or_else(|| FabricError::UnknownNode(node.to_string()))?;
        if !v.alive {
            return Ok(());
        }
        v.alive = false;
        v.incarnation += 1;
        let pending: Vec<u64> = v.pending.iter().map(|p| p.handle).collect();
        v.clear_volatile();
        for h in pending {
            self.handles.insert(h, HandleState::Expired);
        }
        self.handlers.remove(node);
        self.trace_event(Event::Crash {
            node: node.to_string(),
        });
        Ok(())
    }

    /// Brings a crashed vertex back with empty volatile state. Prefixes must
    /// be re-registered and a fresh handler attached by the driver.
    pub fn restart_node(&mut self, node: &str) -> Result<(), FabricError> {
        let v = self
            .vertices
            .get_mut(node)
            .ok_or_else(|| FabricError::UnknownNode(node.to_string()))?;
        if v.alive {
            return Err(FabricError::NodeUp(node.to_string()));
        }
        v.alive = true;
        self.trace_event(Event::Restart {
            node: node.to_string(),
        });
        Ok(())
    }

    // -- event loop --

    /// Processes all events strictly before `t`, then advances the clock to
    /// `t`. Scenario actions applied afterward therefore precede same-tick
    /// packet events.
    pub fn run_until(&mut self, t: Tick) {
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.at >= t {
                break;
            }
            self.process_one();
        }
        if t > self.now {
            self.now = t;
        }
    }

    /// Processes events until the queue drains; errors if `max_events` is
    /// exceeded (a runaway timer loop).
    pub fn run_until_quiescent(&mut self, max_events: u64) -> Result<(), FabricError> {
        let mut processed = 0;
        while self.process_one() {
            processed += 1;
            if processed > max_events {
                return Err(FabricError::RunawaySimulation(max_events));
            }
        }
        Ok(())
    }

    /// Processes a single event; returns false when the queue is empty.
    pub fn process_one(&mut self) -> bool {
        let Some(Reverse(sched)) = self.queue.pop() else {
            return false;
        };
        debug_assert!(sched.at >= self.now);
        self.now = sched.at;
        match sched.kind {
            EventKind::InterestHop {
                to,
                from,
                interest,
                target_inc,
            } => self.interest_arrival(to, from, interest, target_inc),
            EventKind::DataHop {
                to,
                from,
                data,
                target_inc,
            } => self.data_arrival(to, from, data, target_inc),
            EventKind::HandleExpiry { node, handle } => self.handle_expiry(node, handle),
            EventKind::Timer {
                node,
                token,
                target_inc,
            } => {
                let ok = self
                    .vertices
                    .get(&node)
                    .map(|v| v.alive && v.incarnation == target_inc)
                    .unwrap_or(false);
                if ok {
                    self.invoke(&node, |h, info, eff| h.on_timer(info, token, eff));
                }
            }
        }
        true
    }

    fn interest_arrival(&mut self, to: NodeId, from: NodeId, interest: Interest, inc: u64) {
        let Some(v) = self.vertices.get(&to) else {
            return;
        };
        if !v.alive || v.incarnation != inc {
            return; // dropped on arrival at a crashed or restarted vertex
        }
        if v.is_router {
            self.forward_interest(to, from, interest);
            return;
        }
        let owned = self
            .owner_of(&interest.name)
            .map(|o| *o == to)
            .unwrap_or(false);
        if !owned {
            return; // endpoints do not forward
        }
        self.trace_event(Event::InterestRecv {
            node: to.clone(),
            name: interest.name.to_string(),
            nonce: interest.nonce,
        });
        let ri = ReceivedInterest {
            name: interest.name,
            nonce: interest.nonce,
            from,
            at: self.now,
        };
        self.vertices.get_mut(&to).unwrap().received.push(ri.clone());
        self.invoke(&to, |h, info, eff| h.on_interest(info, &ri, eff));
    }

    fn forward_interest(&mut self, router: NodeId, from: NodeId, interest: Interest) {
        {
            let v = self.vertices.get_mut(&router).unwrap();
            // Rule: forward at most once per nonce, never cache the interest.
            if !v.seen_nonces.insert(interest.nonce) {
                return;
            }
        }
        let Some(next) = self.longest_prefix_next_hop(&router, &interest.name) else {
            return; // no FIB match: dropped, issuer's handle expires
        };
        let v = self.vertices.get_mut(&router).unwrap();
        v.pit.push(PitEntry {
            name: interest.name.clone(),
            in_face: from,
            nonce: interest.nonce,
            created: self.now,
            lifetime: interest.lifetime,
        });
        self.trace_event(Event::PitAdd {
            node: router.clone(),
            name: interest.name.to_string(),
            nonce: interest.nonce,
        });
        let lat = self.vertices[&router].neighbors[&next];
        let inc = self.vertices[&next].incarnation;
        self.schedule(
            self.now + lat,
            EventKind::InterestHop {
                to: next,
                from: router,
                interest,
                target_inc: inc,
            },
        );
    }

    fn data_arrival(&mut self, to: NodeId, from: NodeId, data: Data, inc: u64) {
        let alive = self
            .vertices
            .get(&to)
            .map(|v| v.alive && v.incarnation == inc)
            .unwrap_or(false);
        if !alive {
            self.drops += 1;
            self.trace_event(Event::DataDropped {
                node: to,
                name: data.name.to_string(),
                reason: "node_down".into(),
            });
            return;
        }
        let _ = from;
        if self.vertices[&to].is_router {
            let now = self.now;
            let v = self.vertices.get_mut(&to).unwrap();
            v.pit.retain(|e| now <= e.created + e.lifetime);
            let idx = v.pit.iter().position(|e| e.name == data.name);
            let Some(idx) = idx else {
                self.drops += 1;
                self.trace_event(Event::DataDropped {
                    node: to,
                    name: data.name.to_string(),
                    reason: "no_pit".into(),
                });
                return;
            };
            let entry = v.pit.remove(idx);
            self.trace_event(Event::PitConsume {
                node: to.clone(),
                name: entry.name.to_string(),
                nonce: entry.nonce,
            });
            let (at, target_inc) = if entry.in_face == to {
                (self.now, self.vertices[&to].incarnation)
            } else {
                let lat = self.vertices[&to].neighbors[&entry.in_face];
                (self.now + lat, self.vertices[&entry.in_face].incarnation)
            };
            self.schedule(
                at,
                EventKind::DataHop {
                    to: entry.in_face,
                    from: to,
                    data,
                    target_inc,
                },
            );
            return;
        }
        // Endpoint: the data satisfies this node's oldest pending interest
        // with the same name.
        let v = self.vertices.get_mut(&to).unwrap();
        let idx = v.pending.iter().position(|p| p.interest.name == data.name);
        let Some(idx) = idx else {
            self.drops += 1;
            self.trace_event(Event::DataDropped {
                node: to,
                name: data.name.to_string(),
                reason: "no_pending".into(),
            });
            return;
        };
        let pending = v.pending.remove(idx);
        self.handles.insert(pending.handle, HandleState::Satisfied);
        self.trace_event(Event::DataRecv {
            node: to.clone(),
            name: data.name.to_string(),
        });
        let nonce = pending.interest.nonce;
        self.invoke(&to, |h, info, eff| {
            h.on_data(info, &data.name, nonce, &data.payload, eff)
        });
    }

    fn handle_expiry(&mut self, node: NodeId, handle: u64) {
        let Some(v) = self.vertices.get_mut(&node) else {
            return;
        };
        let Some(idx) = v.pending.iter().position(|p| p.handle == handle) else {
            return; // already satisfied or discarded by a crash
        };
        let pending = v.pending.remove(idx);
        self.handles.insert(handle, HandleState::Expired);
        let name = pending.interest.name;
        let nonce = pending.interest.nonce;
        self.invoke(&node, |h, info, eff| h.on_expired(info, &name, nonce, eff));
    }
}
