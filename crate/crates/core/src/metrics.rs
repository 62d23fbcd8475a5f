//! Line-delimited JSON training log.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    F,
    B,
    #[serde(rename = "AGG")]
    Agg,
    #[serde(rename = "REPART")]
    Repart,
    #[serde(rename = "REPL")]
    Repl,
    #[serde(rename = "FAULT")]
    Fault,
    #[serde(rename = "RECOVER")]
    Recover,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::F => "F",
            EventKind::B => "B",
            EventKind::Agg => "AGG",
            EventKind::Repart => "REPART",
            EventKind::Repl => "REPL",
            EventKind::Fault => "FAULT",
            EventKind::Recover => "RECOVER",
        })
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown event {s}"))
    }
}

/// One log line. Optional fields are omitted when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub t: f64,
    pub stage: usize,
    pub worker: u32,
    pub event: EventKind,
    pub batch_id: i64,
    pub version: u64,
    pub duration: f64,
    pub generation: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    /// Layer count for REPART/RECOVER, lineage width for AGG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<usize>>,
    /// In-flight limit in force, on stage-0 F/B records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default)]
    pub run_id: String,
    #[serde(default)]
    pub config_hash: String,
}

impl MetricsRecord {
    pub fn new(
        t: f64,
        stage: usize,
        worker: u32,
        event: EventKind,
        batch_id: i64,
        generation: u64,
    ) -> Self {
        MetricsRecord {
            t,
            stage,
            worker,
            event,
            batch_id,
            version: 0,
            duration: 0.0,
            generation,
            pinned: None,
            layers: None,
            loss: None,
            count: None,
            points: None,
            limit: None,
            detail: None,
            run_id: String::new(),
            config_hash: String::new(),
        }
    }

    pub fn version(mut self, v: u64) -> Self {
        self.version = v;
        self
    }

    pub fn duration(mut self, d: f64) -> Self {
        self.duration = d;
        self
    }

    pub fn pinned(mut self, p: u64) -> Self {
        self.pinned = Some(p);
        self
    }

    pub fn layers(mut self, start: usize, end: usize) -> Self {
        self.layers = Some([start, end]);
        self
    }

    pub fn loss(mut self, l: Option<f64>) -> Self {
        self.loss = l;
        self
    }

    pub fn count(mut self, c: u64) -> Self {
        self.count = Some(c);
        self
    }

    pub fn points(mut self, p: &[usize]) -> Self {
        self.points = Some(p.to_vec());
        self
    }

    pub fn limit(mut self, l: usize) -> Self {
        self.limit = Some(l);
        self
    }

    pub fn detail(mut self, d: impl Into<String>) -> Self {
        self.detail = Some(d.into());
        self
    }
}

/// Writes records with the run identity stamped on each.
pub struct MetricsWriter<W: Write> {
    out: W,
    run_id: String,
    config_hash: String,
    written: usize,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W, run_id: impl Into<String>, config_hash: impl Into<String>) -> Self {
        MetricsWriter {
            out,
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            written: 0,
        }
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<(), Error> {
        let mut rec = rec.clone();
        rec.run_id.clone_from(&self.run_id);
        rec.config_hash.clone_from(&self.config_hash);
        let line = serde_json::to_string(&rec).map_err(|e| Error::Metrics(e.to_string()))?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn finish(mut self) -> Result<W, Error> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn read_records(input: impl BufRead) -> Result<Vec<MetricsRecord>, Error> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Metrics(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_stamping() {
        let r = MetricsRecord::new(0.5, 1, 2, EventKind::Agg, 9, 3)
            .version(4)
            .count(2);
        let mut w = MetricsWriter::new(Vec::new(), "run", "abc");
        w.write(&r).unwrap();
        let bytes = w.finish().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"event\":\"AGG\""));
        assert!(!text.contains("pinned"));
        let back = read_records(&bytes[..]).unwrap();
        assert_eq!(back[0].run_id, "run");
        assert_eq!(back[0].count, Some(2));
        assert_eq!("RECOVER".parse::<EventKind>().unwrap(), EventKind::Recover);
    }

    #[test]
    fn corrupt_line_is_an_error() {
        assert!(read_records(&b"{\"t\":1}\n"[..]).is_err());
    }
}
