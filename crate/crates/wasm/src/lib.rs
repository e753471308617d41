//! Browser entry points for the demo page.
//!
//! Every exported function wraps a plain Rust twin returning
//! `Result<_, String>`, which is what the native tests call.

use citymesh::engine::{run, TraceRecord};
use citymesh::metrics::ReportFormat;
use citymesh::model::{Mode, NodeId};
use citymesh::net::{capacity_budget, link_throughput, sensor_bitrate, BandwidthMode, LinkProfile};
use citymesh::scenario::Scenario;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const BUNDLED: [(&str, &str); 3] = [
    (
        "fire-drill",
        include_str!("../../../scenarios/fire-drill.scn"),
    ),
    (
        "partition-heal",
        include_str!("../../../scenarios/partition-heal.scn"),
    ),
    ("growth", include_str!("../../../scenarios/growth.scn")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

#[wasm_bindgen]
pub fn bundled_names() -> Vec<String> {
    BUNDLED.iter().map(|(n, _)| n.to_string()).collect()
}

#[wasm_bindgen]
pub fn bundled_scenario(name: &str) -> Option<String> {
    bundled(name).map(str::to_string)
}

/// kbit/s at `points` evenly spaced distances up to `max_m`, the first
/// one step away from the light.
pub fn curve(mhz: u32, max_m: f64, points: usize) -> Result<Vec<f64>, String> {
    let mode = BandwidthMode::from_mhz(mhz).ok_or_else(|| format!("no {mhz} MHz mode"))?;
    if points == 0 {
        return Err("need at least one point".into());
    }
    (0..points)
        .map(|i| {
            let d = max_m * (i + 1) as f64 / points as f64;
            let p = LinkProfile::new(mode, d, mode.is_covert()).map_err(|e| e.to_string())?;
            link_throughput(&p).map_err(|e| e.to_string())
        })
        .collect()
}

#[wasm_bindgen]
pub fn throughput_curve(mhz: u32, max_m: f64, points: usize) -> Result<Vec<f64>, JsError> {
    curve(mhz, max_m, points).map_err(|e| JsError::new(&e))
}

/// How many lights one link of `link_kbps` carries at the given sensor load.
pub fn lights_per_link(
    sensors: u32,
    bits_per_reading: u32,
    interval_s: f64,
    link_kbps: f64,
) -> Result<u64, String> {
    let per_light =
        sensor_bitrate(sensors, bits_per_reading, interval_s).map_err(|e| e.to_string())?;
    capacity_budget(link_kbps, per_light).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn capacity(
    sensors: u32,
    bits_per_reading: u32,
    interval_s: f64,
    link_kbps: f64,
) -> Result<f64, JsError> {
    lights_per_link(sensors, bits_per_reading, interval_s, link_kbps)
        .map(|n| n as f64)
        .map_err(|e| JsError::new(&e))
}

fn mode_name(m: Mode) -> String {
    m.to_string()
}

/// Mode segments per node, starting everyday at time zero.
fn timelines(nodes: &[NodeId], trace: &[TraceRecord], end: u64) -> Value {
    let rows: Vec<Value> = nodes
        .iter()
        .map(|&id| {
            let mut segments = Vec::new();
            let (mut from, mut mode) = (0, Mode::Everyday);
            for r in trace {
                if let TraceRecord::ModeChanged { time, node, to, .. } = r {
                    if *node == id {
                        segments.push(json!([from, time.millis(), mode_name(mode)]));
                        (from, mode) = (time.millis(), *to);
                    }
                }
            }
            segments.push(json!([from, end, mode_name(mode)]));
            json!({ "id": id, "segments": segments })
        })
        .collect();
    Value::Array(rows)
}

/// Runs a scenario and returns what the page draws.
pub fn simulate(text: &str) -> Result<Value, String> {
    let s = Scenario::parse(text).map_err(|e| e.to_string())?;
    let out = run(&s).map_err(|e| e.to_string())?;
    let end = out.report.end_time.millis();
    let lights: Vec<NodeId> = s.lights.iter().map(|l| l.id).collect();
    let devices: Vec<NodeId> = s.devices.iter().map(|d| d.id).collect();
    let alerts: Vec<Value> = out
        .trace
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Alert {
                time,
                source,
                cause,
            } => Some(json!([time.millis(), source, cause])),
            _ => None,
        })
        .collect();
    let r = &out.report;
    Ok(json!({
        "name": s.name,
        "seed": s.seed,
        "end": end,
        "posted": r.posted,
        "undelivered": r.undelivered.len(),
        "convergence_ms": r.convergence_ms,
        "table": r.render(ReportFormat::Table),
        "lights": timelines(&lights, &out.trace, end),
        "devices": timelines(&devices, &out.trace, end),
        "deliveries": r.latencies.iter().map(|l| json!([l.received.millis(), l.latency_ms])).collect::<Vec<_>>(),
        "alerts": alerts,
        "records": out.trace.len(),
    }))
}

#[wasm_bindgen]
pub fn run_scenario(text: &str) -> Result<String, JsError> {
    simulate(text)
        .map(|v| v.to_string())
        .map_err(|e| JsError::new(&e))
}
