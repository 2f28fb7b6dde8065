//! Scenario files, the runner, fault injection, and the offline oracles.
//!
//! A scenario is a topology, an application choice, a step budget, a seed,
//! and a script of timed actions (checkpoint, crash one/all, restart). The
//! runner builds the fabric, registers every process and the coordinator,
//! executes the script, runs to quiescence, and writes the trace and the
//! snapshot store under an output directory.
//!
//! The output-equivalence oracle projects traces to per-node application
//! output sequences; outputs replayed after a restart are deduplicated by
//! `(node, step index)` before comparison against the failure-free reference.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apps::{AppKind, CounterApp, FibonacciApp};
use crate::checkpoint::store::{SnapshotStore, StoreError};
use crate::checkpoint::verify::{check_blocking, verify_consistency};
use crate::coordinator::{Coordinator, TOKEN_INITIATE};
use crate::fabric::{Fabric, FabricError, NodeId, Topology};
use crate::names::NamePrefix;
use crate::process::{Process, ProcessConfig, DEFAULT_ABORT_WINDOW};
use crate::recovery::{plan_restart, restart_all, RecoveryError, RestartOptions};
use crate::trace::{Event, Tick, Trace};

const QUIESCENCE_EVENT_CAP: u64 = 5_000_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("scenario io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Scenario schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppChoice {
    Counter,
    Fibonacci,
}

impl AppChoice {
    /// Application namespace prefixed to every node name.
    pub fn namespace(self) -> &'static str {
        match self {
            AppChoice::Counter => "counter",
            AppChoice::Fibonacci => "fib",
        }
    }
}

/// Topology inline or as a path relative to the scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySource {
    Path(String),
    Inline(Topology),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// The coordinator initiates a checkpoint epoch.
    Checkpoint,
    /// Fail-stop crash of one node, or of every vertex when `node` is absent.
    Crash {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node: Option<NodeId>,
    },
    /// Restart the halted system from the latest committed checkpoint.
    RestartAll,
    /// Restart a single crashed vertex; supported for the coordinator (which
    /// is stateless); application processes only restart globally.
    Restart { node: NodeId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub at: Tick,
    #[serde(flatten)]
    pub action: Action,
}

fn default_coordinator() -> String {
    "coord".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub app: AppChoice,
    pub steps: u64,
    pub topology: TopologySource,
    #[serde(default = "default_coordinator")]
    pub coordinator: NodeId,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    /// Loads a scenario file, inlining a referenced topology file.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let raw = std::fs::read_to_string(path)?;
        let mut s: Scenario = serde_json::from_str(&raw)?;
        if let TopologySource::Path(rel) = &s.topology {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            let topo_raw = std::fs::read_to_string(base.join(rel))?;
            s.topology = TopologySource::Inline(serde_json::from_str(&topo_raw)?);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn topology(&self) -> Result<&Topology, ScenarioError> {
        match &self.topology {
            TopologySource::Inline(t) => Ok(t),
            TopologySource::Path(p) => Err(ScenarioError::Invalid(format!(
                "topology path {p:?} not resolved; use Scenario::load"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let topo = self.topology()?;
        topo.validate()?;
        if !topo.nodes.contains(&self.coordinator) {
            return Err(ScenarioError::Invalid(format!(
                "coordinator {:?} is not a topology node",
                self.coordinator
            )));
        }
        if topo.nodes.len() < 2 {
            return Err(ScenarioError::Invalid(
                "need at least one application node besides the coordinator".into(),
            ));
        }
        let mut last: Option<Tick> = None;
        for ev in &self.events {
            if let Some(prev) = last {
                if ev.at <= prev {
                    return Err(ScenarioError::Invalid(format!(
                        "event times must be strictly increasing ({} after {prev})",
                        ev.at
                    )));
                }
            }
            last = Some(ev.at);
        }
        Ok(())
    }

    /// Application nodes in ring order (coordinator excluded).
    pub fn app_nodes(&self) -> Result<Vec<NodeId>, ScenarioError> {
        let topo = self.topology()?;
        let mut nodes: Vec<NodeId> = topo
            .nodes
            .iter()
            .filter(|n| **n != self.coordinator)
            .cloned()
            .collect();
        nodes.sort();
        Ok(nodes)
    }

    /// The same scenario with fault events stripped: the reference run for
    /// output-equivalence checks.
    pub fn failure_free(&self) -> Scenario {
        let mut s = self.clone();
        s.events
            .retain(|e| matches!(e.action, Action::Checkpoint));
        s
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

/// Everything a run leaves behind.
pub struct RunArtifacts {
    pub trace: Trace,
    pub store: SnapshotStore,
    pub trace_path: PathBuf,
}

/// Wires the coordinator's registry entry for a process, enforcing that the
/// process registered its own prefix first.
pub fn register_process(
    fabric: &Fabric,
    coordinator: &mut Coordinator,
    store: &SnapshotStore,
    process: &str,
    app_ns: &str,
) -> Result<(), ScenarioError> {
    let prefix = NamePrefix(vec![app_ns.to_string(), process.to_string()]);
    if fabric.prefix_owner(&prefix).map(|o| o.as_str()) != Some(process) {
        return Err(ScenarioError::Invalid(format!(
            "process {process:?} has not registered prefix {prefix}"
        )));
    }
    coordinator.register(process);
    let registered: Vec<String> = coordinator.registered().iter().cloned().collect();
    store.write_registry(&registered)?;
    Ok(())
}

fn build_app(s: &Scenario, ring: &[NodeId], node: &str, k: usize) -> AppKind {
    match s.app {
        AppChoice::Fibonacci => {
            AppKind::Fibonacci(FibonacciApp::new(ring.to_vec(), node, s.steps))
        }
        AppChoice::Counter => {
            let mut x = s.seed ^ (k as u64).wrapping_mul(0x9E3779B97F4A7C15);
            let offset = 1 + splitmix64(&mut x) % 20;
            AppKind::Counter(CounterApp::new(5, offset, s.steps))
        }
    }
}

/// Builds the fabric for a scenario: topology, snapshot store, prefix
/// registrations, coordinator registry, and booted handlers: everything up
/// to (but not including) the scripted events.
pub fn build_fabric(s: &Scenario, out_dir: &Path) -> Result<(Fabric, SnapshotStore), ScenarioError> {
    s.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let topo = s.topology()?.clone();
    let app_ns = s.app.namespace();
    let ring = s.app_nodes()?;
    let coord = s.coordinator.clone();

    let store = SnapshotStore::new(out_dir.join("store"))?;
    let mut fabric = Fabric::new(topo)?;
    fabric.set_store(store.clone());

    for node in ring.iter().chain(std::iter::once(&coord)) {
        let prefix = NamePrefix(vec![app_ns.to_string(), node.clone()]);
        fabric.register_prefix(node, &prefix)?;
    }

    let mut coordinator = Coordinator::new(&coord, app_ns, DEFAULT_ABORT_WINDOW);
    for p in &ring {
        register_process(&fabric, &mut coordinator, &store, p, app_ns)?;
    }
    fabric.attach_handler(&coord, Box::new(coordinator))?;

    for (k, node) in ring.iter().enumerate() {
        let app = build_app(s, &ring, node, k);
        let config = ProcessConfig {
            coordinator: Some(coord.clone()),
            ..ProcessConfig::default()
        };
        let process = Process::new(node, app_ns, Some(app), config);
        fabric.attach_handler(node, Box::new(process))?;
    }
    Ok((fabric, store))
}

/// Builds the fabric, registers apps and coordinator, executes the scripted
/// events, runs to quiescence, and writes `trace.jsonl` plus the snapshot
/// store under `out_dir`.
pub fn run_scenario(s: &Scenario, out_dir: &Path) -> Result<RunArtifacts, ScenarioError> {
    let (mut fabric, store) = build_fabric(s, out_dir)?;
    for ev in &s.events {
        fabric.run_until(ev.at);
        apply_action(&mut fabric, s, &ev.action)?;
    }
    fabric.run_until_quiescent(QUIESCENCE_EVENT_CAP)?;

    let trace_path = out_dir.join("trace.jsonl");
    fabric.trace().write_jsonl(&trace_path)?;
    Ok(RunArtifacts {
        trace: fabric.trace().clone(),
        store,
        trace_path,
    })
}

/// Applies one scripted action to a running fabric.
pub fn apply_action(fabric: &mut Fabric, s: &Scenario, action: &Action) -> Result<(), ScenarioError> {
    match action {
        Action::Checkpoint => {
            fabric.arm_timer(&s.coordinator, TOKEN_INITIATE, 0);
        }
        Action::Crash { node: Some(n) } => {
            fabric.crash_node(n)?;
        }
        Action::Crash { node: None } => {
            let mut all: Vec<NodeId> = fabric.topology().nodes.clone();
            all.extend(fabric.topology().routers.clone());
            all.sort();
            for n in all {
                fabric.crash_node(&n)?;
            }
        }
        Action::RestartAll => {
            let store = fabric.store().cloned().ok_or(StoreError::NoCheckpoint)?;
            let plan = plan_restart(&store, None)?;
            let opts = RestartOptions {
                coordinator: Some(s.coordinator.clone()),
                app_name: s.app.namespace().to_string(),
                abort_window: DEFAULT_ABORT_WINDOW,
            };
            restart_all(fabric, &plan, &opts)?;
        }
        Action::Restart { node } => {
            if *node != s.coordinator {
                return Err(ScenarioError::Invalid(format!(
                    "single-node restart is only supported for the coordinator, got {node:?}"
                )));
            }
            let store = fabric.store().cloned().ok_or(StoreError::NoCheckpoint)?;
            fabric.restart_node(node)?;
            let prefix = NamePrefix(vec![s.app.namespace().to_string(), node.clone()]);
            fabric.register_prefix(node, &prefix)?;
            // The restarted vertex lost its own routes; re-announce everything.
            fabric.refresh_routes();
            let coordinator =
                Coordinator::from_store(node, s.app.namespace(), DEFAULT_ABORT_WINDOW, &store)?;
            fabric.attach_handler(node, Box::new(coordinator))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Output equivalence oracle
// ---------------------------------------------------------------------------

/// Per-node application outputs in trace order.
pub fn output_projection(trace: &Trace) -> BTreeMap<NodeId, Vec<(u64, String)>> {
    let mut out: BTreeMap<NodeId, Vec<(u64, String)>> = BTreeMap::new();
    for r in trace {
        if let Event::AppOutput { node, step, value } = &r.ev {
            out.entry(node.clone()).or_default().push((*step, value.clone()));
        }
    }
    out
}

/// Deduplicates replayed outputs by `(node, step)`; a step reappearing with a
/// different value is a divergence in itself.
pub fn dedup_outputs(
    proj: &BTreeMap<NodeId, Vec<(u64, String)>>,
) -> Result<BTreeMap<NodeId, BTreeMap<u64, String>>, String> {
    let mut out = BTreeMap::new();
    for (node, seq) in proj {
        let mut per: BTreeMap<u64, String> = BTreeMap::new();
        for (step, value) in seq {
            match per.get(step) {
                None => {
                    per.insert(*step, value.clone());
                }
                Some(prev) if prev == value => {} // replay of the same step
                Some(prev) => {
                    return Err(format!(
                        "{node} step {step}: replayed value {value:?} conflicts with {prev:?}"
                    ))
                }
            }
        }
        out.insert(node.clone(), per);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub equal: bool,
    pub divergence: Option<String>,
}

/// Compares deduplicated per-node output sequences of a faulty run against
/// its failure-free reference.
pub fn check_output_equivalence(reference: &Trace, actual: &Trace) -> EquivalenceReport {
    let expect = match dedup_outputs(&output_projection(reference)) {
        Ok(e) => e,
        Err(d) => {
            return EquivalenceReport {
                equal: false,
                divergence: Some(format!("reference trace inconsistent: {d}")),
            }
        }
    };
    let got = match dedup_outputs(&output_projection(actual)) {
        Ok(g) => g,
        Err(d) => {
            return EquivalenceReport {
                equal: false,
                divergence: Some(d),
            }
        }
    };
    for (node, steps) in &expect {
        let actual_steps = got.get(node).cloned().unwrap_or_default();
        for (step, value) in steps {
            match actual_steps.get(step) {
                Some(v) if v == value => {}
                Some(v) => {
                    return EquivalenceReport {
                        equal: false,
                        divergence: Some(format!(
                            "{node} step {step}: expected {value:?}, got {v:?}"
                        )),
                    }
                }
                None => {
                    return EquivalenceReport {
                        equal: false,
                        divergence: Some(format!("{node} step {step}: output missing")),
                    }
                }
            }
        }
    }
    for (node, steps) in &got {
        let expect_steps = expect.get(node).cloned().unwrap_or_default();
        if let Some((step, value)) = steps.iter().find(|(s, _)| !expect_steps.contains_key(s)) {
            return EquivalenceReport {
                equal: false,
                divergence: Some(format!("{node} step {step}: unexpected output {value:?}")),
            };
        }
    }
    EquivalenceReport {
        equal: true,
        divergence: None,
    }
}

// ---------------------------------------------------------------------------
// Seeded presets
// ---------------------------------------------------------------------------

/// Deterministic seed expansion for scenario scheduling choices.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Star topology: application nodes and the coordinator around one router,
/// every link latency 1.
pub fn star_topology(app_nodes: usize, seed: u64) -> Topology {
    let mut nodes: Vec<NodeId> = (0..app_nodes).map(|i| format!("n{i}")).collect();
    nodes.push("coord".to_string());
    let links = nodes
        .iter()
        .map(|n| (n.clone(), "r0".to_string(), 1))
        .collect();
    Topology {
        nodes,
        routers: vec!["r0".to_string()],
        links,
        seed,
    }
}

pub mod presets {
    use super::*;

    /// Three fibonacci nodes, twenty steps, no faults.
    pub fn fib_failure_free(seed: u64) -> Scenario {
        Scenario {
            app: AppChoice::Fibonacci,
            steps: 20,
            topology: TopologySource::Inline(star_topology(3, seed)),
            coordinator: "coord".to_string(),
            events: vec![],
            seed,
        }
    }

    /// Fibonacci run with one checkpoint at a seed-chosen tick.
    pub fn fib_with_checkpoint(seed: u64) -> Scenario {
        let mut x = seed;
        let ckpt = 10 + splitmix64(&mut x) % 100;
        let mut s = fib_failure_free(seed);
        s.events = vec![ScenarioEvent {
            at: ckpt,
            action: Action::Checkpoint,
        }];
        s
    }

    /// Checkpoint at a seed-chosen tick, crash-all comfortably after the
    /// commit, restart from the latest committed epoch.
    pub fn fib_crash_recover(seed: u64) -> Scenario {
        let mut x = seed;
        let ckpt = 10 + splitmix64(&mut x) % 100;
        let crash = ckpt + 60 + splitmix64(&mut x) % 60;
        let mut s = fib_failure_free(seed);
        s.events = vec![
            ScenarioEvent {
                at: ckpt,
                action: Action::Checkpoint,
            },
            ScenarioEvent {
                at: crash,
                action: Action::Crash { node: None },
            },
            ScenarioEvent {
                at: crash + 10,
                action: Action::RestartAll,
            },
        ];
        s
    }

    /// Three staggered counter instances: checkpoint, kill, restart.
    pub fn counter_crash_recover(seed: u64) -> Scenario {
        let mut x = seed;
        let ckpt = 20 + splitmix64(&mut x) % 40;
        let crash = ckpt + 50 + splitmix64(&mut x) % 30;
        Scenario {
            app: AppChoice::Counter,
            steps: 30,
            topology: TopologySource::Inline(star_topology(3, seed)),
            coordinator: "coord".to_string(),
            events: vec![
                ScenarioEvent {
                    at: ckpt,
                    action: Action::Checkpoint,
                },
                ScenarioEvent {
                    at: crash,
                    action: Action::Crash { node: None },
                },
                ScenarioEvent {
                    at: crash + 10,
                    action: Action::RestartAll,
                },
            ],
            seed,
        }
    }

    /// Two committed epochs with a coordinator crash + restart in between
    /// (when `with_fault`); the processes' application events must not care.
    pub fn coordinator_fault(seed: u64, with_fault: bool) -> Scenario {
        let mut s = fib_failure_free(seed);
        let mut events = vec![ScenarioEvent {
            at: 20,
            action: Action::Checkpoint,
        }];
        if with_fault {
            events.push(ScenarioEvent {
                at: 60,
                action: Action::Crash {
                    node: Some("coord".to_string()),
                },
            });
            events.push(ScenarioEvent {
                at: 70,
                action: Action::Restart {
                    node: "coord".to_string(),
                },
            });
        }
        events.push(ScenarioEvent {
            at: 100,
            action: Action::Checkpoint,
        });
        s.events = events;
        s
    }
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// Outcome of running and verifying one seeded scenario.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub seed: u64,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Runs a scenario and applies every applicable check: per-epoch consistency,
/// the blocking property, and (for fault scenarios) output equivalence
/// against the failure-free oracle.
pub fn run_seed_check(s: &Scenario, out_dir: &Path) -> SweepOutcome {
    let mut failures = Vec::new();
    match run_scenario(s, out_dir) {
        Ok(artifacts) => {
            match artifacts.store.committed_epochs() {
                Ok(epochs) => {
                    for epoch in epochs {
                        match artifacts.store.load_global(epoch) {
                            Ok(g) => {
                                let report = verify_consistency(&g, artifacts.trace.records());
                                if !report.is_consistent() {
                                    failures.extend(report.orphan_messages);
                                    failures.extend(report.in_flight_at_snapshot);
                                    failures.extend(report.orphan_interests);
                                }
                            }
                            Err(e) => failures.push(format!("epoch {epoch} unloadable: {e}")),
                        }
                    }
                }
                Err(e) => failures.push(format!("store unreadable: {e}")),
            }
            failures.extend(check_blocking(artifacts.trace.records()));
            let has_faults = s
                .events
                .iter()
                .any(|e| !matches!(e.action, Action::Checkpoint));
            if has_faults {
                match run_scenario(&s.failure_free(), &out_dir.join("oracle")) {
                    Ok(oracle) => {
                        let eq = check_output_equivalence(&oracle.trace, &artifacts.trace);
                        if !eq.equal {
                            failures.push(eq.divergence.unwrap_or_else(|| "diverged".into()));
                        }
                    }
                    Err(e) => failures.push(format!("oracle run failed: {e}")),
                }
            }
        }
        Err(e) => failures.push(format!("run failed: {e}")),
    }
    SweepOutcome {
        seed: s.seed,
        passed: failures.is_empty(),
        failures,
    }
}

/// Runs `seeds` variations of a scenario in parallel worker contexts; each
/// fabric stays single-threaded and shares nothing with its siblings.
pub fn sweep(base: &Scenario, seeds: u64, out: &Path) -> Result<Vec<SweepOutcome>, ScenarioError> {
    use rayon::prelude::*;
    std::fs::create_dir_all(out)?;
    let mut outcomes: Vec<SweepOutcome> = (0..seeds)
        .into_par_iter()
        .map(|k| {
            let mut s = base.clone();
            s.seed = base.seed + k;
            run_seed_check(&s, &out.join(format!("seed-{}", s.seed)))
        })
        .collect();
    outcomes.sort_by_key(|o| o.seed);
    Ok(outcomes)
}
