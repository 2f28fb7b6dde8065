//! Evaluation applications as deterministic state machines.
//!
//! * [`CounterApp`] counts up on a local timer, one increment per step, and
//!   never communicates; instances run independently with staggered starts.
//! * [`FibonacciApp`] circulates a `(prev, curr, index)` token around a ring:
//!   on receiving it a node outputs `curr`, computes `(curr, prev+curr,
//!   index+1)`, and sends the result to the next ring member. The output
//!   sequence across the ring is exactly the Fibonacci numbers.
//!
//! Application state serializes losslessly; the checkpoint layer stores it as
//! opaque bytes.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::fabric::NodeId;
use crate::trace::Tick;

/// What one application step produced: outbound sends, trace outputs keyed by
/// step index, and an optional timer re-arm.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct StepEffects {
    pub sends: Vec<(NodeId, Vec<u8>)>,
    pub outputs: Vec<(u64, String)>,
    pub rearm_timer: Option<Tick>,
}

mod biguint_dec {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_str_radix(10))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Counter
// ---------------------------------------------------------------------------

/// Counts till infinity (bounded here by a step budget so runs quiesce).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterApp {
    #[serde(with = "biguint_dec")]
    pub value: BigUint,
    pub tick_interval: Tick,
    pub start_offset: Tick,
    pub budget: u64,
    pub started: bool,
}

impl CounterApp {
    pub fn new(tick_interval: Tick, start_offset: Tick, budget: u64) -> Self {
        Self {
            value: BigUint::ZERO,
            tick_interval,
            start_offset,
            budget,
            started: false,
        }
    }

    fn step_index(&self) -> u64 {
        // Steps are numbered by the value they produce.
        u64::try_from(&self.value).unwrap_or(u64::MAX)
    }

    fn done(&self) -> bool {
        self.step_index() >= self.budget
    }

    fn on_start(&mut self) -> StepEffects {
        self.started = true;
        StepEffects {
            rearm_timer: Some(self.start_offset),
            ..Default::default()
        }
    }

    fn on_timer(&mut self) -> StepEffects {
        if self.done() {
            return StepEffects::default();
        }
        self.value += 1u32;
        StepEffects {
            outputs: vec![(self.step_index(), self.value.to_str_radix(10))],
            rearm_timer: (!self.done()).then_some(self.tick_interval),
            ..Default::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Fibonacci ring
// ---------------------------------------------------------------------------

/// The token circulating the ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FibToken {
    pub prev: String,
    pub curr: String,
    pub index: u64,
}

impl FibToken {
    pub fn new(prev: &BigUint, curr: &BigUint, index: u64) -> Self {
        Self {
            prev: prev.to_str_radix(10),
            curr: curr.to_str_radix(10),
            index,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("token serializes")
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

/// Iterative distributed Fibonacci over a ring of nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FibonacciApp {
    pub ring: Vec<NodeId>,
    pub me: NodeId,
    /// Highest sequence index to output; the token stops there.
    pub max_index: u64,
    pub seeded: bool,
}

impl FibonacciApp {
    pub fn new(ring: Vec<NodeId>, me: &str, max_index: u64) -> Self {
        Self {
            ring,
            me: me.to_string(),
            max_index,
            seeded: false,
        }
    }

    fn next_node(&self) -> Option<&NodeId> {
        let idx = self.ring.iter().position(|n| n == &self.me)?;
        Some(&self.ring[(idx + 1) % self.ring.len()])
    }

    fn on_start(&mut self) -> StepEffects {
        // The first ring member seeds the token with F(0)=0, F(1)=1.
        if self.seeded || self.ring.first() != Some(&self.me) {
            return StepEffects::default();
        }
        self.seeded = true;
        self.step(FibToken::new(&BigUint::ZERO, &BigUint::from(1u32), 1))
    }

    /// Receiving `(prev, curr, index)`: output `curr`, compute
    /// `(curr, prev+curr, index+1)`, send to the next ring member.
    fn step(&mut self, token: FibToken) -> StepEffects {
        let (Ok(prev), Ok(curr)) = (token.prev.parse::<BigUint>(), token.curr.parse::<BigUint>())
        else {
            return StepEffects::default();
        };
        let mut eff = StepEffects {
            outputs: vec![(token.index, curr.to_str_radix(10))],
            ..Default::default()
        };
        if token.index < self.max_index {
            if let Some(next) = self.next_node() {
                let succ = FibToken::new(&curr, &(&prev + &curr), token.index + 1);
                eff.sends.push((next.clone(), succ.encode()));
            }
        }
        eff
    }

    fn on_payload(&mut self, bytes: &[u8]) -> StepEffects {
        match FibToken::decode(bytes) {
            Some(token) => self.step(token),
            None => StepEffects::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// The application attached to a process; serialized whole into snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AppKind {
    Counter(CounterApp),
    Fibonacci(FibonacciApp),
}

impl AppKind {
    /// First activation of a fresh (non-restored) instance.
    pub fn on_start(&mut self) -> StepEffects {
        match self {
            AppKind::Counter(c) => c.on_start(),
            AppKind::Fibonacci(f) => f.on_start(),
        }
    }

    /// An in-order application payload arrived from `_from`.
    pub fn on_payload(&mut self, _from: &str, bytes: &[u8]) -> StepEffects {
        match self {
            AppKind::Counter(_) => StepEffects::default(),
            AppKind::Fibonacci(f) => f.on_payload(bytes),
        }
    }

    /// The application's local timer fired.
    pub fn on_timer(&mut self) -> StepEffects {
        match self {
            AppKind::Counter(c) => c.on_timer(),
            AppKind::Fibonacci(_) => StepEffects::default(),
        }
    }

    /// Re-activation after a checkpoint resume or a restart from snapshot;
    /// timer-driven apps re-arm here, token-driven apps wait for payloads.
    pub fn on_resume(&mut self) -> StepEffects {
        match self {
            AppKind::Counter(c) => StepEffects {
                rearm_timer: (!c.done() && c.started).then_some(c.tick_interval),
                ..Default::default()
            },
            AppKind::Fibonacci(_) => StepEffects::default(),
        }
    }

    /// Delay between timer steps, when the app is timer-driven.
    pub fn tick_interval(&self) -> Option<Tick> {
        match self {
            AppKind::Counter(c) => Some(c.tick_interval),
            AppKind::Fibonacci(_) => None,
        }
    }

    /// The other nodes running the same distributed application.
    pub fn peers(&self) -> Vec<NodeId> {
        match self {
            AppKind::Counter(_) => Vec::new(),
            AppKind::Fibonacci(f) => f.ring.iter().filter(|n| **n != f.me).cloned().collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("app state serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}
