//! Append-only run trace.
//!
//! Every packet event, protocol transition, fault, and application output is
//! recorded as one JSON line `{"t":..,"seq":..,"ev":"..",...}`. Records are
//! totally ordered by `(t, seq)` and identical runs serialize byte-for-byte
//! identically, which is what the determinism checks compare.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Simulation time in ticks.
pub type Tick = u64;

/// Which protocol layer initiated a transfer. The blocking and drain checks
/// only constrain application traffic; checkpoint-layer transfers (snapshot
/// done-reports) are exempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    App,
    Ckpt,
}

/// One trace record; `ev` discriminates the body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: Tick,
    pub seq: u64,
    #[serde(flatten)]
    pub ev: Event,
}

/// Everything that can happen in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum Event {
    // -- forwarding fabric --
    InterestSent { node: String, name: String, nonce: u64 },
    InterestRecv { node: String, name: String, nonce: u64 },
    DataSent { node: String, name: String },
    DataRecv { node: String, name: String },
    DataDropped { node: String, name: String, reason: String },
    Crash { node: String },
    Restart { node: String },
    FibAdd { node: String, prefix: String, next_hop: String },
    PitAdd { node: String, name: String, nonce: u64 },
    PitConsume { node: String, name: String, nonce: u64 },

    // -- messaging --
    RtsIssued { node: String, peer: String, transfer: u64, chan_seq: u64, layer: Layer, name: String },
    CtsIssued { node: String, peer: String, name: String },
    PayloadSent { node: String, peer: String, transfer: u64, chan_seq: u64, layer: Layer },
    PayloadDelivered { node: String, from: String, transfer: u64, chan_seq: u64, layer: Layer },
    TransferFailed { node: String, peer: String, transfer: u64, layer: Layer },
    OrphanCts { node: String, name: String },

    // -- checkpoint protocol --
    CheckpointInit { epoch: u64 },
    Suspend { node: String },
    FlushSent { node: String, peer: String, name: String },
    FlushAcked { node: String, peer: String },
    Snapshot { node: String, epoch: u64 },
    EpochCommit { epoch: u64 },
    EpochAbort { epoch: u64, node: String },
    Resume { node: String },

    // -- recovery --
    DiscoverSent { node: String, peer: String },
    DiscoverOk { node: String, peer: String },
    PendingReissued { node: String, name: String },
    RecoveryComplete { node: String },

    // -- application --
    AppOutput { node: String, step: u64, value: String },
}

/// In-memory trace, appended to by the fabric in event order.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Tick, seq: u64, ev: Event) {
        self.records.push(TraceRecord { t, seq, ev });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TraceRecord> {
        self.records.iter()
    }

    /// Serializes to JSON lines; stable field order makes this byte-exact
    /// across identical runs.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_jsonl().as_bytes())?;
        w.flush()
    }

    pub fn read_jsonl(path: &Path) -> std::io::Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

impl<'a> IntoIterator for &'a Trace {
    type Item = &'a TraceRecord;
    type IntoIter = std::slice::Iter<'a, TraceRecord>;
    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serializes_with_ev_tag_and_flat_fields() {
        let mut tr = Trace::new();
        tr.push(
            3,
            7,
            Event::InterestSent {
                node: "a".into(),
                name: "ccnx://fib/b/check".into(),
                nonce: 42,
            },
        );
        let line = tr.to_jsonl();
        assert_eq!(
            line.trim(),
            r#"{"t":3,"seq":7,"ev":"interest_sent","node":"a","name":"ccnx://fib/b/check","nonce":42}"#
        );
    }

    #[test]
    fn jsonl_round_trips() {
        let mut tr = Trace::new();
        tr.push(1, 0, Event::Crash { node: "r0".into() });
        tr.push(
            2,
            1,
            Event::AppOutput {
                node: "n0".into(),
                step: 4,
                value: "3".into(),
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        tr.write_jsonl(&path).unwrap();
        let back = Trace::read_jsonl(&path).unwrap();
        assert_eq!(back.records(), tr.records());
    }
}
