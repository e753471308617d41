//! Headless runs, validation and the live command-center API.

use std::fmt::Write as _;
use std::path::Path;

use citymesh::engine::{self, trace_jsonl, RunOutput};
use citymesh::metrics::ReportFormat;
use citymesh::scenario::Scenario;

pub mod api;

/// Reads and parses a scenario file. Errors read `path:line: message`.
pub fn load_scenario(path: &Path) -> Result<Scenario, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Scenario::parse(&text).map_err(|e| format!("{}:{}: {}", path.display(), e.line, e.message))
}

/// Runs a scenario, optionally overriding its seed.
pub fn run_scenario(mut scenario: Scenario, seed: Option<u64>) -> Result<RunOutput, String> {
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    engine::run(&scenario).map_err(|e| e.to_string())
}

pub fn render(out: &RunOutput, format: ReportFormat) -> String {
    out.report.render(format)
}

pub fn render_trace(out: &RunOutput) -> String {
    trace_jsonl(&out.trace)
}

/// One-paragraph summary printed by `check`.
pub fn describe(s: &Scenario) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}: ok", s.name);
    let _ = writeln!(
        out,
        "  {} lights, {} devices, {} links, {} keys",
        s.lights.len(),
        s.devices.len(),
        s.links.len(),
        s.keys.len()
    );
    let _ = writeln!(
        out,
        "  {} scripted events over {} ms, seed {}",
        s.events.len(),
        s.duration.millis(),
        s.seed
    );
    out
}
