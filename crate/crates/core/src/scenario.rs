//! Scenario files.
//!
//! A scenario is line-oriented text split into `[scenario]`, `[nodes]`,
//! `[topology]`, `[traces]` and `[events]` sections. `#` starts a comment.
//! Tokens are whitespace separated; double quotes group a token and `\"`
//! escapes a quote inside one. See `scenarios/` for complete examples.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crdt::ReviewPolicy;
use crate::model::{GuidanceState, NodeId, NodeKind, SensorKind, SimTime};
use crate::net::{BandwidthMode, LinkKind, LinkModel, LinkProfile, ThroughputModel};
use crate::sensing::{AlertCause, DetectionRule, RuleKind, SamplingPolicy};

pub const DEFAULT_SYNC_INTERVAL_MS: u64 = 1_000;
pub const DEFAULT_SIZE_SAMPLE_INTERVAL_MS: u64 = 10_000;
pub const DEFAULT_LINK_DISTANCE_M: f64 = 10.0;
/// Readings of a quiet street at night, in `SensorKind` order.
pub const DEFAULT_TRACE_BASE: [f64; 6] = [0.0, 5.0, 120.0, 18.0, 55.0, 420.0];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightDecl {
    pub id: NodeId,
    pub position: (f64, f64),
    pub review: ReviewPolicy,
    /// Empty means the default fire and vision rules.
    pub rules: Vec<DetectionRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDecl {
    pub id: NodeId,
    pub review: ReviewPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterDecl {
    pub id: NodeId,
    pub position: (f64, f64),
    pub review: ReviewPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyDecl {
    pub name: String,
    pub trusted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDecl {
    pub a: NodeId,
    pub b: NodeId,
    pub kind: LinkKind,
    pub profile: LinkProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDecl {
    pub base: [f64; 6],
    pub noise: f64,
}

impl Default for TraceDecl {
    fn default() -> Self {
        Self {
            base: DEFAULT_TRACE_BASE,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "target", content = "node", rename_all = "kebab-case")]
pub enum PurgeTarget {
    All,
    Node(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum Action {
    VisionEvent {
        light: NodeId,
    },
    EnvRamp {
        light: NodeId,
        sensor: SensorKind,
        target: f64,
        duration_ms: u64,
    },
    ServerDown,
    ServerUp,
    LinkCut {
        a: NodeId,
        b: NodeId,
    },
    LinkRestore {
        a: NodeId,
        b: NodeId,
    },
    Partition {
        side: BTreeSet<NodeId>,
    },
    Heal {
        side: BTreeSet<NodeId>,
    },
    IssueAlarm {
        region: BTreeSet<NodeId>,
        cause: AlertCause,
    },
    RevokeAlarm {
        region: BTreeSet<NodeId>,
    },
    PairDevices {
        a: NodeId,
        b: NodeId,
        token_a: String,
        token_b: String,
    },
    PostMessage {
        device: NodeId,
        key: String,
        body: String,
        signature_valid: bool,
    },
    SetGuidance {
        light: NodeId,
        state: GuidanceState,
    },
    Approve {
        replica: NodeId,
        key: String,
        seq: u64,
        approve: bool,
    },
    Purge {
        target: PurgeTarget,
        horizon: SimTime,
    },
    /// Does nothing beyond a trace record.
    Note {
        text: String,
    },
}

impl Action {
    /// Every node the action names.
    pub fn referenced_nodes(&self) -> Vec<NodeId> {
        match self {
            Action::VisionEvent { light }
            | Action::EnvRamp { light, .. }
            | Action::SetGuidance { light, .. } => vec![*light],
            Action::LinkCut { a, b }
            | Action::LinkRestore { a, b }
            | Action::PairDevices { a, b, .. } => vec![*a, *b],
            Action::Partition { side } | Action::Heal { side } => side.iter().copied().collect(),
            Action::IssueAlarm { region, .. } | Action::RevokeAlarm { region } => {
                region.iter().copied().collect()
            }
            Action::PostMessage { device, .. } => vec![*device],
            Action::Approve { replica, .. } => vec![*replica],
            Action::Purge {
                target: PurgeTarget::Node(n),
                ..
            } => vec![*n],
            Action::ServerDown | Action::ServerUp | Action::Purge { .. } | Action::Note { .. } => {
                Vec::new()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub time: SimTime,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration: SimTime,
    pub sync_interval_ms: u64,
    pub size_sample_interval_ms: u64,
    pub sampling: SamplingPolicy,
    pub link_model: LinkModel,
    pub ack_device: Option<NodeId>,
    pub center: CenterDecl,
    pub lights: Vec<LightDecl>,
    pub devices: Vec<DeviceDecl>,
    pub keys: Vec<KeyDecl>,
    pub links: Vec<LinkDecl>,
    pub traces: BTreeMap<NodeId, TraceDecl>,
    pub events: Vec<ScenarioEvent>,
}

impl Scenario {
    pub fn declares(&self, id: NodeId) -> bool {
        match id.kind {
            NodeKind::CommandCenter => self.center.id == id,
            NodeKind::StreetLight => self.lights.iter().any(|l| l.id == id),
            NodeKind::CitizenDevice => self.devices.iter().any(|d| d.id == id),
        }
    }

    pub fn key(&self, name: &str) -> Option<&KeyDecl> {
        self.keys.iter().find(|k| k.name == name)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = std::iter::once(self.center.id)
            .chain(self.lights.iter().map(|l| l.id))
            .chain(self.devices.iter().map(|d| d.id))
            .collect();
        ids.sort();
        ids
    }

    pub fn rules_for(&self, light: &LightDecl) -> Vec<DetectionRule> {
        if light.rules.is_empty() {
            DetectionRule::default_set()
        } else {
            light.rules.clone()
        }
    }

    pub fn parse(text: &str) -> Result<Scenario, ParseError> {
        Parser::default().parse(text)
    }

    /// Canonical text form; `parse(to_text(s)) == s`.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Scenario,
    Nodes,
    Topology,
    Traces,
    Events,
}

#[derive(Default)]
struct Parser {
    name: Option<String>,
    seed: u64,
    duration: Option<SimTime>,
    sync_interval: Option<u64>,
    size_interval: Option<u64>,
    sampling: Option<SamplingPolicy>,
    processing_ms: Option<f64>,
    anchors: Option<ThroughputModel>,
    ack_device: Option<(usize, NodeId)>,
    center: Option<CenterDecl>,
    lights: Vec<LightDecl>,
    devices: Vec<DeviceDecl>,
    keys: Vec<KeyDecl>,
    rules: Vec<(usize, NodeId, DetectionRule)>,
    links: Vec<(usize, LinkDecl)>,
    traces: BTreeMap<NodeId, (usize, TraceDecl)>,
    events: Vec<(usize, ScenarioEvent)>,
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<String>, ParseError> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(&c) = chars.peek() else { break };
        if c == '#' {
            break;
        }
        let mut tok = String::new();
        if c == '"' {
            chars.next();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '\\' => match chars.next() {
                        Some(e @ ('"' | '\\')) => tok.push(e),
                        Some('n') => tok.push('\n'),
                        _ => return Err(ParseError::new(lineno, "bad escape in quoted string")),
                    },
                    '"' => {
                        closed = true;
                        break;
                    }
                    c => tok.push(c),
                }
            }
            if !closed {
                return Err(ParseError::new(lineno, "unterminated quoted string"));
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                tok.push(c);
                chars.next();
            }
        }
        out.push(tok);
    }
    Ok(out)
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

struct Line<'a> {
    no: usize,
    toks: &'a [String],
}

impl<'a> Line<'a> {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError::new(self.no, msg)
    }

    fn arg(&self, i: usize, what: &str) -> Result<&'a str, ParseError> {
        self.toks
            .get(i)
            .map(String::as_str)
            .ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn num<T: std::str::FromStr>(&self, i: usize, what: &str) -> Result<T, ParseError> {
        let raw = self.arg(i, what)?;
        raw.parse()
            .map_err(|_| self.err(format!("invalid {what} `{raw}`")))
    }

    fn node(&self, i: usize) -> Result<NodeId, ParseError> {
        let raw = self.arg(i, "node id")?;
        raw.parse()
            .map_err(|e: crate::model::NodeIdParseError| self.err(e.to_string()))
    }

    fn nodes_from(&self, i: usize) -> Result<BTreeSet<NodeId>, ParseError> {
        let mut out = BTreeSet::new();
        for (j, tok) in self.toks.iter().enumerate().skip(i) {
            if tok.contains('=') {
                break;
            }
            out.insert(self.node(j)?);
        }
        if out.is_empty() {
            return Err(self.err("expected at least one node id"));
        }
        Ok(out)
    }

    /// `key=value` options after position `from`.
    fn options(&self, from: usize) -> Result<BTreeMap<&'a str, &'a str>, ParseError> {
        let mut out = BTreeMap::new();
        for tok in self.toks.iter().skip(from) {
            let Some((k, v)) = tok.split_once('=') else {
                continue;
            };
            if out.insert(k, v).is_some() {
                return Err(self.err(format!("option `{k}` given twice")));
            }
        }
        Ok(out)
    }

    fn no_extra(&self, n: usize) -> Result<(), ParseError> {
        match self.toks.get(n) {
            Some(t) => Err(self.err(format!("unexpected token `{t}`"))),
            None => Ok(()),
        }
    }
}

fn parse_review(line: &Line<'_>, opts: &BTreeMap<&str, &str>) -> Result<ReviewPolicy, ParseError> {
    match opts.get("review").copied() {
        None | Some("manual") => Ok(ReviewPolicy::Manual),
        Some("approve-all") => Ok(ReviewPolicy::ApproveAll),
        Some(other) => Err(line.err(format!("unknown review policy `{other}`"))),
    }
}

fn check_opts(
    line: &Line<'_>,
    opts: &BTreeMap<&str, &str>,
    allowed: &[&str],
) -> Result<(), ParseError> {
    match opts.keys().find(|k| !allowed.contains(k)) {
        Some(k) => Err(line.err(format!("unknown option `{k}`"))),
        None => Ok(()),
    }
}

impl Parser {
    fn parse(mut self, text: &str) -> Result<Scenario, ParseError> {
        let mut section = Section::None;
        for (i, raw) in text.lines().enumerate() {
            let no = i + 1;
            let toks = tokenize(raw, no)?;
            if toks.is_empty() {
                continue;
            }
            if toks.len() == 1 && toks[0].starts_with('[') && toks[0].ends_with(']') {
                section = match toks[0].as_str() {
                    "[scenario]" => Section::Scenario,
                    "[nodes]" => Section::Nodes,
                    "[topology]" => Section::Topology,
                    "[traces]" => Section::Traces,
                    "[events]" => Section::Events,
                    other => return Err(ParseError::new(no, format!("unknown section {other}"))),
                };
                continue;
            }
            let line = Line { no, toks: &toks };
            match section {
                Section::None => return Err(line.err("content before the first section header")),
                Section::Scenario => self.scenario_line(&line)?,
                Section::Nodes => self.node_line(&line)?,
                Section::Topology => self.topology_line(&line)?,
                Section::Traces => self.trace_line(&line)?,
                Section::Events => self.event_line(&line)?,
            }
        }
        self.finish()
    }

    fn scenario_line(&mut self, l: &Line<'_>) -> Result<(), ParseError> {
        match l.arg(0, "setting")? {
            "name" => {
                self.name = Some(l.arg(1, "name")?.to_string());
                l.no_extra(2)
            }
            "seed" => {
                self.seed = l.num(1, "seed")?;
                l.no_extra(2)
            }
            "duration" => {
                self.duration = Some(SimTime(l.num(1, "duration")?));
                l.no_extra(2)
            }
            "sync-interval" => {
                let v: u64 = l.num(1, "sync interval")?;
                if v == 0 {
                    return Err(l.err("sync interval must be positive"));
                }
                self.sync_interval = Some(v);
                l.no_extra(2)
            }
            "size-sample-interval" => {
                let v: u64 = l.num(1, "size sample interval")?;
                if v == 0 {
                    return Err(l.err("size sample interval must be positive"));
                }
                self.size_interval = Some(v);
                l.no_extra(2)
            }
            "processing-ms" => {
                let v: f64 = l.num(1, "processing latency")?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(l.err("processing latency must be non-negative"));
                }
                self.processing_ms = Some(v);
                l.no_extra(2)
            }
            "sampling" => {
                let everyday = l.num(1, "everyday interval")?;
                let emergency = l.num(2, "emergency interval")?;
                self.sampling = Some(
                    SamplingPolicy::new(everyday, emergency).map_err(|e| l.err(e.to_string()))?,
                );
                l.no_extra(3)
            }
            "anchors" => {
                let mut anchors = Vec::new();
                for (i, tok) in l.toks.iter().enumerate().skip(1) {
                    let parsed = tok
                        .split_once(':')
                        .and_then(|(d, t)| Some((d.parse().ok()?, t.parse().ok()?)));
                    let Some(pair) = parsed else {
                        return Err(l.err(format!("anchor {i} must be DIST:KBPS, got `{tok}`")));
                    };
                    anchors.push(pair);
                }
                self.anchors =
                    Some(ThroughputModel::new(anchors).map_err(|e| l.err(e.to_string()))?);
                Ok(())
            }
            "ack-device" => {
                self.ack_device = Some((l.no, l.node(1)?));
                l.no_extra(2)
            }
            other => Err(l.err(format!("unknown scenario setting `{other}`"))),
        }
    }

    fn position(l: &Line<'_>) -> Result<(f64, f64), ParseError> {
        if l.arg(2, "`pos`")? != "pos" {
            return Err(l.err("expected `pos X Y`"));
        }
        Ok((l.num(3, "x position")?, l.num(4, "y position")?))
    }

    fn node_line(&mut self, l: &Line<'_>) -> Result<(), ParseError> {
        let kind = l.arg(0, "node kind")?;
        match kind {
            "center" | "light" => {
                let index: u32 = l.num(1, "index")?;
                let position = Self::position(l)?;
                let opts = l.options(5)?;
                check_opts(l, &opts, &["review"])?;
                if l.toks.len() > 5 + opts.len() {
                    return Err(l.err(format!("unexpected token `{}`", l.toks[5])));
                }
                let review = parse_review(l, &opts)?;
                if kind == "center" {
                    if self.center.is_some() {
                        return Err(l.err("only one command center may be declared"));
                    }
                    self.center = Some(CenterDecl {
                        id: NodeId::center(index),
                        position,
                        review,
                    });
                } else {
                    let id = NodeId::light(index);
                    if self.lights.iter().any(|x| x.id == id) {
                        return Err(l.err(format!("{id} declared twice")));
                    }
                    self.lights.push(LightDecl {
                        id,
                        position,
                        review,
                        rules: Vec::new(),
                    });
                }
                Ok(())
            }
            "device" => {
                let id = NodeId::device(l.num(1, "index")?);
                let opts = l.options(2)?;
                check_opts(l, &opts, &["review"])?;
                if l.toks.len() > 2 + opts.len() {
                    return Err(l.err(format!("unexpected token `{}`", l.toks[2])));
                }
                if self.devices.iter().any(|x| x.id == id) {
                    return Err(l.err(format!("{id} declared twice")));
                }
                self.devices.push(DeviceDecl {
                    id,
                    review: parse_review(l, &opts)?,
                });
                Ok(())
            }
            "key" => {
                let name = l.arg(1, "key name")?.to_string();
                let trusted = match l.arg(2, "trust (trusted|untrusted)")? {
                    "trusted" => true,
                    "untrusted" => false,
                    other => return Err(l.err(format!("unknown trust `{other}`"))),
                };
                l.no_extra(3)?;
                if name == crate::engine::OPERATOR_KEY {
                    return Err(l.err(format!("key name `{name}` is reserved")));
                }
                if self.keys.iter().any(|k| k.name == name) {
                    return Err(l.err(format!("key `{name}` declared twice")));
                }
                self.keys.push(KeyDecl { name, trusted });
                Ok(())
            }
            "rule" => {
                let light = l.node(1)?;
                let rule = match l.arg(2, "rule kind")? {
                    "vision" => {
                        l.no_extra(3)?;
                        DetectionRule::vision()
                    }
                    "fire" => {
                        let opts = l.options(3)?;
                        check_opts(l, &opts, &["co2", "temp", "window"])?;
                        let get = |k: &str, default: f64| -> Result<f64, ParseError> {
                            opts.get(k).map_or(Ok(default), |v| {
                                v.parse().map_err(|_| l.err(format!("invalid {k} `{v}`")))
                            })
                        };
                        let fire = DetectionRule::default_fire();
                        let window = opts.get("window").map_or(Ok(fire.window_ms), |v| {
                            v.parse()
                                .map_err(|_| l.err(format!("invalid window `{v}`")))
                        })?;
                        DetectionRule::fire(
                            get("co2", fire.particulate_threshold)?,
                            get("temp", fire.temp_rise_threshold)?,
                            window,
                        )
                        .map_err(|e| l.err(e.to_string()))?
                    }
                    other => return Err(l.err(format!("unknown rule kind `{other}`"))),
                };
                self.rules.push((l.no, light, rule));
                Ok(())
            }
            other => Err(l.err(format!("unknown node kind `{other}`"))),
        }
    }

    fn topology_line(&mut self, l: &Line<'_>) -> Result<(), ParseError> {
        if l.arg(0, "`link`")? != "link" {
            return Err(l.err(format!("unknown topology entry `{}`", l.toks[0])));
        }
        let a = l.node(1)?;
        let b = l.node(2)?;
        let kind_raw = l.arg(3, "link kind")?;
        let kind = LinkKind::from_name(kind_raw)
            .ok_or_else(|| l.err(format!("unknown link kind `{kind_raw}`")))?;
        let opts = l.options(4)?;
        check_opts(l, &opts, &["mode", "dist", "encrypted"])?;
        let covert = kind == LinkKind::CovertMesh;
        let mode = match opts.get("mode") {
            None if covert => BandwidthMode::Narrow8MHz,
            None => BandwidthMode::Standard20MHz,
            Some(v) => v
                .parse()
                .ok()
                .and_then(BandwidthMode::from_mhz)
                .ok_or_else(|| l.err(format!("unknown bandwidth mode `{v}` (8, 16 or 20)")))?,
        };
        let distance = opts.get("dist").map_or(Ok(DEFAULT_LINK_DISTANCE_M), |v| {
            v.parse()
                .map_err(|_| l.err(format!("invalid distance `{v}`")))
        })?;
        let encrypted = match opts.get("encrypted").copied() {
            None => mode.is_covert(),
            Some("yes") => true,
            Some("no") => false,
            Some(v) => return Err(l.err(format!("encrypted must be yes or no, got `{v}`"))),
        };
        let profile =
            LinkProfile::new(mode, distance, encrypted).map_err(|e| l.err(e.to_string()))?;
        if l.toks.len() > 4 + opts.len() {
            return Err(l.err(format!("unexpected token `{}`", l.toks[4])));
        }
        self.links.push((
            l.no,
            LinkDecl {
                a,
                b,
                kind,
                profile,
            },
        ));
        Ok(())
    }

    fn trace_line(&mut self, l: &Line<'_>) -> Result<(), ParseError> {
        let light = l.node(0)?;
        if !light.is_light() {
            return Err(l.err(format!("traces belong to lights, not {light}")));
        }
        let opts = l.options(1)?;
        if l.toks.len() > 1 + opts.len() {
            return Err(l.err(format!("unexpected token `{}`", l.toks[1])));
        }
        let mut trace = TraceDecl::default();
        for (k, v) in opts {
            let value: f64 = v
                .parse()
                .map_err(|_| l.err(format!("invalid value for {k}: `{v}`")))?;
            if !value.is_finite() {
                return Err(l.err(format!("{k} must be finite")));
            }
            if k == "noise" {
                if value < 0.0 {
                    return Err(l.err("noise must be non-negative"));
                }
                trace.noise = value;
            } else {
                let kind = SensorKind::from_name(k)
                    .ok_or_else(|| l.err(format!("unknown sensor `{k}`")))?;
                trace.base[kind.index()] = value;
            }
        }
        if self.traces.insert(light, (l.no, trace)).is_some() {
            return Err(l.err(format!("trace for {light} given twice")));
        }
        Ok(())
    }

    fn event_line(&mut self, l: &Line<'_>) -> Result<(), ParseError> {
        let time = SimTime(l.num(0, "event time")?);
        let verb = l.arg(1, "action")?;
        let action = match verb {
            "vision" => {
                l.no_extra(3)?;
                Action::VisionEvent { light: l.node(2)? }
            }
            "ramp" => {
                let sensor_raw = l.arg(3, "sensor")?;
                let sensor = SensorKind::from_name(sensor_raw)
                    .ok_or_else(|| l.err(format!("unknown sensor `{sensor_raw}`")))?;
                let target: f64 = l.num(4, "ramp target")?;
                if !target.is_finite() {
                    return Err(l.err("ramp target must be finite"));
                }
                l.no_extra(6)?;
                Action::EnvRamp {
                    light: l.node(2)?,
                    sensor,
                    target,
                    duration_ms: l.num(5, "ramp duration")?,
                }
            }
            "server-down" => {
                l.no_extra(2)?;
                Action::ServerDown
            }
            "server-up" => {
                l.no_extra(2)?;
                Action::ServerUp
            }
            "cut" | "restore" => {
                l.no_extra(4)?;
                let (a, b) = (l.node(2)?, l.node(3)?);
                if verb == "cut" {
                    Action::LinkCut { a, b }
                } else {
                    Action::LinkRestore { a, b }
                }
            }
            "partition" => Action::Partition {
                side: l.nodes_from(2)?,
            },
            "heal" => Action::Heal {
                side: l.nodes_from(2)?,
            },
            "alarm" => {
                let region = l.nodes_from(2)?;
                let opts = l.options(2)?;
                check_opts(l, &opts, &["cause"])?;
                let cause = match opts.get("cause") {
                    None => AlertCause::OperatorAlarm,
                    Some(c) => AlertCause::from_name(c)
                        .ok_or_else(|| l.err(format!("unknown cause `{c}`")))?,
                };
                Action::IssueAlarm { region, cause }
            }
            "revoke" => Action::RevokeAlarm {
                region: l.nodes_from(2)?,
            },
            "pair" => {
                l.no_extra(6)?;
                Action::PairDevices {
                    a: l.node(2)?,
                    b: l.node(3)?,
                    token_a: l.arg(4, "first token")?.to_string(),
                    token_b: l.arg(5, "second token")?.to_string(),
                }
            }
            "post" => {
                let signature_valid = match l.toks.get(5).map(String::as_str) {
                    None => true,
                    Some("forged") => false,
                    Some(t) => return Err(l.err(format!("unexpected token `{t}`"))),
                };
                l.no_extra(6)?;
                Action::PostMessage {
                    device: l.node(2)?,
                    key: l.arg(3, "key name")?.to_string(),
                    body: l.arg(4, "message body")?.to_string(),
                    signature_valid,
                }
            }
            "guidance" => {
                let raw = l.arg(3, "guidance state")?;
                l.no_extra(4)?;
                Action::SetGuidance {
                    light: l.node(2)?,
                    state: GuidanceState::from_name(raw)
                        .ok_or_else(|| l.err(format!("unknown guidance state `{raw}`")))?,
                }
            }
            "approve" => {
                let raw = l.arg(3, "KEY:SEQ")?;
                let (key, seq) = raw
                    .rsplit_once(':')
                    .and_then(|(k, s)| Some((k.to_string(), s.parse().ok()?)))
                    .ok_or_else(|| l.err(format!("expected KEY:SEQ, got `{raw}`")))?;
                let approve = match l.arg(4, "decision (yes|no)")? {
                    "yes" => true,
                    "no" => false,
                    other => {
                        return Err(l.err(format!("decision must be yes or no, got `{other}`")))
                    }
                };
                l.no_extra(5)?;
                Action::Approve {
                    replica: l.node(2)?,
                    key,
                    seq,
                    approve,
                }
            }
            "purge" => {
                let target = match l.arg(2, "purge target")? {
                    "all" => PurgeTarget::All,
                    _ => PurgeTarget::Node(l.node(2)?),
                };
                l.no_extra(4)?;
                Action::Purge {
                    target,
                    horizon: SimTime(l.num(3, "purge horizon")?),
                }
            }
            "note" => {
                l.no_extra(3)?;
                Action::Note {
                    text: l.arg(2, "note text")?.to_string(),
                }
            }
            other => return Err(l.err(format!("unknown action `{other}`"))),
        };
        if let Some((prev_line, prev)) = self.events.last() {
            if prev.time > time {
                return Err(l.err(format!(
                    "events out of order: {} follows {} (line {prev_line})",
                    time.millis(),
                    prev.time.millis()
                )));
            }
        }
        self.events.push((l.no, ScenarioEvent { time, action }));
        Ok(())
    }

    fn finish(self) -> Result<Scenario, ParseError> {
        let eof = 0;
        let center = self
            .center
            .ok_or_else(|| ParseError::new(eof, "no command center declared"))?;
        let mut scenario = Scenario {
            name: self.name.unwrap_or_else(|| "unnamed".into()),
            seed: self.seed,
            duration: self
                .duration
                .ok_or_else(|| ParseError::new(eof, "missing `duration` in [scenario]"))?,
            sync_interval_ms: self.sync_interval.unwrap_or(DEFAULT_SYNC_INTERVAL_MS),
            size_sample_interval_ms: self
                .size_interval
                .unwrap_or(DEFAULT_SIZE_SAMPLE_INTERVAL_MS),
            sampling: self.sampling.unwrap_or_default(),
            link_model: LinkModel {
                throughput: self.anchors.unwrap_or_default(),
                processing_ms: self
                    .processing_ms
                    .unwrap_or(crate::net::DEFAULT_PROCESSING_MS),
            },
            ack_device: None,
            center,
            lights: self.lights,
            devices: self.devices,
            keys: self.keys,
            links: Vec::new(),
            traces: BTreeMap::new(),
            events: Vec::new(),
        };
        let undeclared =
            |line: usize, id: NodeId| ParseError::new(line, format!("undeclared node {id}"));

        if let Some((line, id)) = self.ack_device {
            if !id.is_device() || !scenario.declares(id) {
                return Err(ParseError::new(
                    line,
                    format!("ack-device {id} is not a declared device"),
                ));
            }
            scenario.ack_device = Some(id);
        }
        for (line, light, rule) in self.rules {
            if !light.is_light() {
                return Err(ParseError::new(
                    line,
                    format!("rules belong to lights, not {light}"),
                ));
            }
            if rule.window_ms < scenario.sampling.emergency_ms() {
                return Err(ParseError::new(
                    line,
                    "rule window is shorter than the emergency sampling interval",
                ));
            }
            let decl = scenario
                .lights
                .iter_mut()
                .find(|l| l.id == light)
                .ok_or_else(|| undeclared(line, light))?;
            decl.rules.push(rule);
        }
        for (line, link) in self.links {
            for n in [link.a, link.b] {
                if !scenario.declares(n) {
                    return Err(undeclared(line, n));
                }
            }
            let mut probe = crate::net::Topology::new();
            for n in [link.a, link.b] {
                probe.add_node(n).ok();
            }
            probe
                .add_link(link.a, link.b, link.kind, link.profile)
                .map_err(|e| ParseError::new(line, e.to_string()))?;
            scenario.links.push(link);
        }
        for (light, (line, trace)) in self.traces {
            if !scenario.declares(light) {
                return Err(undeclared(line, light));
            }
            scenario.traces.insert(light, trace);
        }
        let mut key_owner: BTreeMap<String, NodeId> = BTreeMap::new();
        for (line, event) in self.events {
            for n in event.action.referenced_nodes() {
                if !scenario.declares(n) {
                    return Err(undeclared(line, n));
                }
            }
            validate_action(&scenario, &event.action, &mut key_owner)
                .map_err(|m| ParseError::new(line, m))?;
            scenario.events.push(event);
        }
        Ok(scenario)
    }
}

/// Shape checks beyond node existence. Shared with operator commands.
pub(crate) fn validate_action(
    scenario: &Scenario,
    action: &Action,
    key_owner: &mut BTreeMap<String, NodeId>,
) -> Result<(), String> {
    let need = |id: &NodeId, ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(format!("{id} is not a {what}"))
        }
    };
    match action {
        Action::VisionEvent { light }
        | Action::EnvRamp { light, .. }
        | Action::SetGuidance { light, .. } => need(light, light.is_light(), "street light"),
        Action::IssueAlarm { region, .. } | Action::RevokeAlarm { region } => region
            .iter()
            .try_for_each(|n| need(n, n.is_light(), "street light")),
        Action::PairDevices { a, b, .. } => {
            need(a, a.is_device(), "citizen device")?;
            need(b, b.is_device(), "citizen device")?;
            if a == b {
                return Err("cannot pair a device with itself".into());
            }
            Ok(())
        }
        Action::PostMessage { device, key, .. } => {
            need(device, device.is_device(), "citizen device")?;
            if scenario.key(key).is_none() {
                return Err(format!("undeclared key `{key}`"));
            }
            match key_owner.get(key) {
                Some(owner) if owner != device => Err(format!(
                    "key `{key}` already posts from {owner}; a key belongs to one device"
                )),
                _ => {
                    key_owner.insert(key.clone(), *device);
                    Ok(())
                }
            }
        }
        Action::Approve { key, seq, .. } => {
            if scenario.key(key).is_none() && key != crate::engine::OPERATOR_KEY {
                return Err(format!("undeclared key `{key}`"));
            }
            if *seq == 0 {
                return Err("sequence numbers start at 1".into());
            }
            Ok(())
        }
        Action::LinkCut { a, b } | Action::LinkRestore { a, b } => {
            if scenario
                .links
                .iter()
                .any(|l| (l.a == *a && l.b == *b) || (l.a == *b && l.b == *a))
            {
                Ok(())
            } else {
                Err(format!("no declared link between {a} and {b}"))
            }
        }
        _ => Ok(()),
    }
}

fn fmt_review(r: ReviewPolicy) -> &'static str {
    match r {
        ReviewPolicy::Manual => "",
        ReviewPolicy::ApproveAll => " review=approve-all",
    }
}

fn join_nodes(nodes: &BTreeSet<NodeId>) -> String {
    nodes
        .iter()
        .map(NodeId::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::VisionEvent { light } => write!(f, "vision {light}"),
            Action::EnvRamp {
                light,
                sensor,
                target,
                duration_ms,
            } => write!(f, "ramp {light} {sensor} {target} {duration_ms}"),
            Action::ServerDown => f.write_str("server-down"),
            Action::ServerUp => f.write_str("server-up"),
            Action::LinkCut { a, b } => write!(f, "cut {a} {b}"),
            Action::LinkRestore { a, b } => write!(f, "restore {a} {b}"),
            Action::Partition { side } => write!(f, "partition {}", join_nodes(side)),
            Action::Heal { side } => write!(f, "heal {}", join_nodes(side)),
            Action::IssueAlarm { region, cause } => {
                write!(f, "alarm {} cause={}", join_nodes(region), cause.name())
            }
            Action::RevokeAlarm { region } => write!(f, "revoke {}", join_nodes(region)),
            Action::PairDevices {
                a,
                b,
                token_a,
                token_b,
            } => write!(f, "pair {a} {b} {} {}", quote(token_a), quote(token_b)),
            Action::PostMessage {
                device,
                key,
                body,
                signature_valid,
            } => {
                write!(f, "post {device} {} {}", quote(key), quote(body))?;
                if !signature_valid {
                    f.write_str(" forged")?;
                }
                Ok(())
            }
            Action::SetGuidance { light, state } => write!(f, "guidance {light} {state}"),
            Action::Approve {
                replica,
                key,
                seq,
                approve,
            } => write!(
                f,
                "approve {replica} {} {}",
                quote(&format!("{key}:{seq}")),
                if *approve { "yes" } else { "no" }
            ),
            Action::Purge { target, horizon } => match target {
                PurgeTarget::All => write!(f, "purge all {}", horizon.millis()),
                PurgeTarget::Node(n) => write!(f, "purge {n} {}", horizon.millis()),
            },
            Action::Note { text } => write!(f, "note {}", quote(text)),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        let w = &mut out;
        writeln!(w, "[scenario]")?;
        writeln!(w, "name {}", quote(&self.name))?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "duration {}", self.duration.millis())?;
        writeln!(w, "sync-interval {}", self.sync_interval_ms)?;
        writeln!(w, "size-sample-interval {}", self.size_sample_interval_ms)?;
        writeln!(
            w,
            "sampling {} {}",
            self.sampling.everyday_ms(),
            self.sampling.emergency_ms()
        )?;
        writeln!(w, "processing-ms {}", self.link_model.processing_ms)?;
        let anchors: Vec<String> = self
            .link_model
            .throughput
            .anchors()
            .iter()
            .map(|(d, t)| format!("{d}:{t}"))
            .collect();
        writeln!(w, "anchors {}", anchors.join(" "))?;
        if let Some(ack) = self.ack_device {
            writeln!(w, "ack-device {ack}")?;
        }

        writeln!(w, "\n[nodes]")?;
        let c = &self.center;
        writeln!(
            w,
            "center {} pos {} {}{}",
            c.id.index,
            c.position.0,
            c.position.1,
            fmt_review(c.review)
        )?;
        for l in &self.lights {
            writeln!(
                w,
                "light {} pos {} {}{}",
                l.id.index,
                l.position.0,
                l.position.1,
                fmt_review(l.review)
            )?;
        }
        for d in &self.devices {
            writeln!(w, "device {}{}", d.id.index, fmt_review(d.review))?;
        }
        for k in &self.keys {
            let trust = if k.trusted { "trusted" } else { "untrusted" };
            writeln!(w, "key {} {trust}", quote(&k.name))?;
        }
        for l in &self.lights {
            for r in &l.rules {
                match r.kind {
                    RuleKind::VisionEvent => writeln!(w, "rule {} vision", l.id)?,
                    RuleKind::FireRule => writeln!(
                        w,
                        "rule {} fire co2={} temp={} window={}",
                        l.id, r.particulate_threshold, r.temp_rise_threshold, r.window_ms
                    )?,
                }
            }
        }

        writeln!(w, "\n[topology]")?;
        for l in &self.links {
            writeln!(
                w,
                "link {} {} {} mode={} dist={} encrypted={}",
                l.a,
                l.b,
                l.kind,
                l.profile.mode.mhz(),
                l.profile.distance_m,
                if l.profile.encrypted { "yes" } else { "no" }
            )?;
        }

        writeln!(w, "\n[traces]")?;
        for (light, t) in &self.traces {
            write!(w, "{light}")?;
            for kind in SensorKind::ALL {
                write!(w, " {}={}", kind.name(), t.base[kind.index()])?;
            }
            writeln!(w, " noise={}", t.noise)?;
        }

        writeln!(w, "\n[events]")?;
        for e in &self.events {
            writeln!(w, "{} {}", e.time.millis(), e.action)?;
        }
        f.write_str(&out)
    }
}
