//! Run metrics and their text renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{NodeId, SimTime};

pub const ROWS_HEADER: &str = "metric,time_ms,node,subject,value";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub msg: String,
    pub replica: NodeId,
    pub posted: SimTime,
    pub received: SimTime,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Undelivered {
    pub msg: String,
    pub replica: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeSample {
    pub time: SimTime,
    pub node: NodeId,
    pub messages: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub msg: String,
    /// The device that acknowledged.
    pub acked_by: NodeId,
    pub posted: SimTime,
    pub rtt_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub end_time: SimTime,
    pub posted: usize,
    pub latencies: Vec<LatencySample>,
    pub undelivered: Vec<Undelivered>,
    /// Replica holds a message with no delivery record. Always zero unless
    /// the engine loses track of something.
    pub unaccounted: usize,
    pub convergence_ms: Option<u64>,
    pub sizes: Vec<SizeSample>,
    pub frames_per_link: BTreeMap<String, u64>,
    pub round_trips: Vec<RoundTrip>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Rows,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "rows" | "delimited-rows" | "csv" => Ok(ReportFormat::Rows),
            other => Err(format!("unknown report format `{other}` (table or rows)")),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricsReport {
    pub fn is_empty(&self) -> bool {
        self.posted == 0
            && self.latencies.is_empty()
            && self.undelivered.is_empty()
            && self.unaccounted == 0
            && self.convergence_ms.is_none()
            && self.sizes.is_empty()
            && self.frames_per_link.is_empty()
            && self.round_trips.is_empty()
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Table => self.to_table(),
            ReportFormat::Rows => self.to_rows(),
        }
    }

    /// One header row, then one record per sample.
    pub fn to_rows(&self) -> String {
        let mut out = String::new();
        out.push_str(ROWS_HEADER);
        out.push('\n');
        if self.is_empty() {
            return out;
        }
        let mut row = |metric: &str, time: SimTime, node: &str, subject: &str, value: &str| {
            let _ = writeln!(
                out,
                "{metric},{},{},{},{value}",
                time.millis(),
                csv_field(node),
                csv_field(subject)
            );
        };
        let end = self.end_time;
        row("posted", end, "", "", &self.posted.to_string());
        row("unaccounted", end, "", "", &self.unaccounted.to_string());
        if let Some(c) = self.convergence_ms {
            row("convergence_ms", end, "", "", &c.to_string());
        }
        for l in &self.latencies {
            row(
                "latency_ms",
                l.received,
                &l.replica.to_string(),
                &l.msg,
                &l.latency_ms.to_string(),
            );
        }
        for u in &self.undelivered {
            row("undelivered", end, &u.replica.to_string(), &u.msg, "1");
        }
        for s in &self.sizes {
            row(
                "size_bytes",
                s.time,
                &s.node.to_string(),
                &s.messages.to_string(),
                &s.bytes.to_string(),
            );
        }
        for (link, n) in &self.frames_per_link {
            row("frames", end, "", link, &n.to_string());
        }
        for r in &self.round_trips {
            row(
                "rtt_ms",
                r.posted.plus_millis(r.rtt_ms),
                &r.acked_by.to_string(),
                &r.msg,
                &r.rtt_ms.to_string(),
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "scenario      {}", self.scenario);
        let _ = writeln!(w, "seed          {}", self.seed);
        let _ = writeln!(w, "end time      {} ms", self.end_time.millis());
        let _ = writeln!(w, "posted        {}", self.posted);
        let _ = writeln!(w, "delivered     {}", self.latencies.len());
        let _ = writeln!(w, "undelivered   {}", self.undelivered.len());
        let _ = writeln!(w, "unaccounted   {}", self.unaccounted);
        match self.convergence_ms {
            Some(c) => {
                let _ = writeln!(w, "convergence   {c} ms after last heal");
            }
            None => {
                let _ = writeln!(w, "convergence   -");
            }
        }
        if !self.latencies.is_empty() {
            let mut ms: Vec<u64> = self.latencies.iter().map(|l| l.latency_ms).collect();
            ms.sort_unstable();
            let pct = |p: usize| ms[(ms.len() - 1) * p / 100];
            let _ = writeln!(
                w,
                "latency ms    min {}  p50 {}  p95 {}  max {}",
                ms[0],
                pct(50),
                pct(95),
                ms[ms.len() - 1]
            );
        }
        if !self.round_trips.is_empty() {
            let _ = writeln!(w, "\nround trips");
            let _ = writeln!(
                w,
                "  {:<24} {:<12} {:>10} {:>8}",
                "message", "acked by", "posted", "rtt ms"
            );
            for r in &self.round_trips {
                let _ = writeln!(
                    w,
                    "  {:<24} {:<12} {:>10} {:>8}",
                    r.msg,
                    r.acked_by.to_string(),
                    r.posted.millis(),
                    r.rtt_ms
                );
            }
        }
        if !self.frames_per_link.is_empty() {
            let _ = writeln!(w, "\nframes per link");
            for (link, n) in &self.frames_per_link {
                let _ = writeln!(w, "  {link:<32} {n:>8}");
            }
        }
        if !self.sizes.is_empty() {
            let _ = writeln!(w, "\nstore sizes");
            let _ = writeln!(
                w,
                "  {:>10} {:<12} {:>8} {:>10}",
                "time ms", "node", "messages", "bytes"
            );
            for s in &self.sizes {
                let _ = writeln!(
                    w,
                    "  {:>10} {:<12} {:>8} {:>10}",
                    s.time.millis(),
                    s.node.to_string(),
                    s.messages,
                    s.bytes
                );
            }
        }
        if !self.undelivered.is_empty() {
            let _ = writeln!(w, "\nundelivered");
            for u in &self.undelivered {
                let _ = writeln!(w, "  {:<24} {}", u.msg, u.replica);
            }
        }
        out
    }
}
