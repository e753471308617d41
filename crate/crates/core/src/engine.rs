//! Deterministic discrete-event engine.
//!
//! Scripted actions and spontaneous events (sampling, detection, anti-entropy
//! rounds, deliveries) share one priority queue keyed by
//! `(time, insertion order, node)`. A run is a pure function of the scenario.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::{AggregateView, CommandCenter, CommandError, Dispatch, Ingest, LightCommand};
use crate::crdt::{
    known_keys, AuthorKey, CrdtError, CrdtState, KeyId, MsgId, Replica, ReviewStatus,
};
use crate::metrics::{LatencySample, MetricsReport, RoundTrip, SizeSample, Undelivered};
use crate::model::{GuidanceState, Mode, NodeId, SensorFrame, SensorKind, SimTime, FRAME_BITS};
use crate::net::{Delivery, Failure, LinkId, LinkKind, NetError, Recovery, Topology};
use crate::scenario::{validate_action, Action, PurgeTarget, Scenario};
use crate::sensing::{
    sensor_topic, AlertCause, CrisisAlert, Environment, LightEvent, LightNode, Ramp, SensingError,
    Trigger,
};

/// Key the command center signs its bulletins with.
pub const OPERATOR_KEY: &str = "operator";
/// Size of commands, alerts, pushes and acks on the wire.
pub const CONTROL_BITS: u64 = FRAME_BITS;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error(transparent)]
    Store(#[from] CrdtError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
}

/// One line of the event trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TraceRecord {
    Action {
        time: SimTime,
        action: Action,
    },
    Rejected {
        time: SimTime,
        action: String,
        reason: String,
    },
    Sensor {
        time: SimTime,
        topic: String,
        value: f32,
    },
    FrameUndeliverable {
        time: SimTime,
        light: NodeId,
    },
    Alert {
        time: SimTime,
        source: NodeId,
        cause: AlertCause,
    },
    AlertReceived {
        time: SimTime,
        source: NodeId,
        cause: AlertCause,
    },
    ModeChanged {
        time: SimTime,
        node: NodeId,
        from: Mode,
        to: Mode,
    },
    GuidanceChanged {
        time: SimTime,
        light: NodeId,
        from: GuidanceState,
        to: GuidanceState,
    },
    Command {
        time: SimTime,
        light: NodeId,
        command: LightCommand,
        status: CommandStatus,
    },
    Push {
        time: SimTime,
        light: NodeId,
        device: NodeId,
    },
    D2dLink {
        time: SimTime,
        a: NodeId,
        b: NodeId,
    },
    LinkState {
        time: SimTime,
        link: String,
        up: bool,
    },
    Posted {
        time: SimTime,
        node: NodeId,
        msg: String,
        body: String,
        signature_valid: bool,
    },
    Sync {
        time: SimTime,
        from: NodeId,
        to: NodeId,
        messages: usize,
        bytes: usize,
    },
    SyncDropped {
        time: SimTime,
        from: NodeId,
        to: NodeId,
    },
    Delivered {
        time: SimTime,
        msg: String,
        replica: NodeId,
        latency_ms: u64,
    },
    Held {
        time: SimTime,
        msg: String,
        replica: NodeId,
    },
    Reviewed {
        time: SimTime,
        msg: String,
        replica: NodeId,
        status: ReviewStatus,
    },
    Ack {
        time: SimTime,
        msg: String,
        acked_by: NodeId,
        rtt_ms: u64,
    },
    AckUndeliverable {
        time: SimTime,
        msg: String,
        acked_by: NodeId,
    },
    Size {
        time: SimTime,
        node: NodeId,
        messages: usize,
        bytes: usize,
    },
    Converged {
        time: SimTime,
        after_heal_ms: u64,
    },
}

impl TraceRecord {
    pub fn time(&self) -> SimTime {
        use TraceRecord::*;
        match self {
            Action { time, .. }
            | Rejected { time, .. }
            | Sensor { time, .. }
            | FrameUndeliverable { time, .. }
            | Alert { time, .. }
            | AlertReceived { time, .. }
            | ModeChanged { time, .. }
            | GuidanceChanged { time, .. }
            | Command { time, .. }
            | Push { time, .. }
            | D2dLink { time, .. }
            | LinkState { time, .. }
            | Posted { time, .. }
            | Sync { time, .. }
            | SyncDropped { time, .. }
            | Delivered { time, .. }
            | Held { time, .. }
            | Reviewed { time, .. }
            | Ack { time, .. }
            | AckUndeliverable { time, .. }
            | Size { time, .. }
            | Converged { time, .. } => *time,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace records serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandStatus {
    Sent,
    Undeliverable,
    Applied,
}

/// JSON lines, one record per line.
pub fn trace_jsonl(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        out.push_str(&r.to_json());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceView {
    pub id: NodeId,
    pub mode: Mode,
    pub peers: Vec<NodeId>,
    pub messages: usize,
    pub held: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkView {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    pub kind: LinkKind,
    pub up: bool,
}

/// Everything the console shows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub scenario: String,
    pub time: SimTime,
    pub server_down: bool,
    pub city: AggregateView,
    pub devices: Vec<DeviceView>,
    pub links: Vec<LinkView>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone)]
enum Pending {
    Act(Action),
    Sample {
        epoch: u64,
    },
    FrameArrive(SensorFrame),
    AlertArrive(CrisisAlert),
    CommandArrive(Dispatch),
    PushArrive {
        light: NodeId,
    },
    SyncRound,
    SyncArrive {
        from: NodeId,
        link: LinkId,
        state: CrdtState,
    },
    AckArrive {
        msg: MsgId,
        acked_by: NodeId,
    },
    SizeSample,
}

#[derive(Debug, Clone)]
struct Queued {
    time: SimTime,
    seq: u64,
    node: NodeId,
    event: Pending,
}

impl Queued {
    fn key(&self) -> (SimTime, u64, NodeId) {
        (self.time, self.seq, self.node)
    }
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
struct LightState {
    node: LightNode,
    history: Vec<SensorFrame>,
    epoch: u64,
    fire_active: bool,
    window_ms: u64,
}

#[derive(Debug, Clone)]
struct PostRecord {
    origin: NodeId,
    posted: SimTime,
    reached: BTreeMap<NodeId, SimTime>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    scenario: Scenario,
    now: SimTime,
    queue: BinaryHeap<Reverse<Queued>>,
    next_seq: u64,
    topology: Topology,
    lights: BTreeMap<NodeId, LightState>,
    device_modes: BTreeMap<NodeId, Mode>,
    center: CommandCenter,
    replicas: BTreeMap<NodeId, Replica>,
    key_names: BTreeMap<KeyId, String>,
    key_owner: BTreeMap<String, NodeId>,
    posts: BTreeMap<MsgId, PostRecord>,
    acked: BTreeSet<MsgId>,
    trace: Vec<TraceRecord>,
    frames_per_link: BTreeMap<String, u64>,
    sizes: Vec<SizeSample>,
    round_trips: Vec<RoundTrip>,
    last_heal: Option<SimTime>,
    convergence_ms: Option<u64>,
}

impl Engine {
    pub fn new(scenario: Scenario) -> Result<Self, EngineError> {
        let mut topology = Topology::new();
        for id in scenario.node_ids() {
            topology.add_node(id)?;
        }
        for l in &scenario.links {
            topology.add_link(l.a, l.b, l.kind, l.profile)?;
        }

        let operator = AuthorKey::named(OPERATOR_KEY, true);
        let known = known_keys(
            scenario
                .keys
                .iter()
                .map(|k| AuthorKey::named(&k.name, k.trusted))
                .chain(std::iter::once(operator)),
        );
        let mut key_names: BTreeMap<KeyId, String> = scenario
            .keys
            .iter()
            .map(|k| (KeyId::derive(&k.name), k.name.clone()))
            .collect();
        key_names.insert(operator.key_id, OPERATOR_KEY.to_string());

        let mut center = CommandCenter::new(
            scenario.center.id,
            Replica::new(scenario.center.id, known.clone(), scenario.center.review),
            operator,
        );
        let mut lights = BTreeMap::new();
        let mut replicas = BTreeMap::new();
        for decl in &scenario.lights {
            let trace = scenario.traces.get(&decl.id).cloned().unwrap_or_default();
            let env = Environment::constant(trace.base).with_noise(trace.noise, scenario.seed);
            let rules = scenario.rules_for(decl);
            let window_ms = rules.iter().map(|r| r.window_ms).max().unwrap_or(0);
            let node = LightNode::new(decl.id, scenario.sampling, rules, env)?;
            lights.insert(
                decl.id,
                LightState {
                    node,
                    history: Vec::new(),
                    epoch: 0,
                    fire_active: false,
                    window_ms,
                },
            );
            center.aggregate.register_light(decl.id, decl.position);
            replicas.insert(decl.id, Replica::new(decl.id, known.clone(), decl.review));
        }
        let mut device_modes = BTreeMap::new();
        for d in &scenario.devices {
            device_modes.insert(d.id, Mode::Everyday);
            replicas.insert(d.id, Replica::new(d.id, known.clone(), d.review));
        }
        let key_owner = scenario
            .events
            .iter()
            .filter_map(|e| match &e.action {
                Action::PostMessage { device, key, .. } => Some((key.clone(), *device)),
                _ => None,
            })
            .collect();

        let mut engine = Engine {
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            next_seq: 0,
            topology,
            lights,
            device_modes,
            center,
            replicas,
            key_names,
            key_owner,
            posts: BTreeMap::new(),
            acked: BTreeSet::new(),
            trace: Vec::new(),
            frames_per_link: BTreeMap::new(),
            sizes: Vec::new(),
            round_trips: Vec::new(),
            last_heal: None,
            convergence_ms: None,
            scenario,
        };
        let center_id = engine.center.id;
        let scripted: Vec<_> = engine.scenario.events.clone();
        for e in scripted {
            let node = e
                .action
                .referenced_nodes()
                .first()
                .copied()
                .unwrap_or(center_id);
            engine.schedule(e.time, node, Pending::Act(e.action));
        }
        let first_samples: Vec<_> = engine
            .lights
            .iter()
            .map(|(id, l)| (*id, l.node.next_sample_time()))
            .collect();
        for (id, t) in first_samples {
            engine.schedule(t, id, Pending::Sample { epoch: 0 });
        }
        for id in engine.scenario.node_ids() {
            engine.schedule(SimTime::ZERO, id, Pending::SyncRound);
        }
        let interval = engine.scenario.size_sample_interval_ms;
        engine.schedule(SimTime(interval), center_id, Pending::SizeSample);
        Ok(engine)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn center(&self) -> &CommandCenter {
        &self.center
    }

    pub fn light(&self, id: NodeId) -> Option<&LightNode> {
        self.lights.get(&id).map(|l| &l.node)
    }

    pub fn replica(&self, id: NodeId) -> Option<&Replica> {
        if id == self.center.id {
            Some(&self.center.replica)
        } else {
            self.replicas.get(&id)
        }
    }

    fn replica_mut(&mut self, id: NodeId) -> Result<&mut Replica, EngineError> {
        if id == self.center.id {
            Ok(&mut self.center.replica)
        } else {
            self.replicas
                .get_mut(&id)
                .ok_or_else(|| EngineError::Invalid(format!("{id} has no store replica")))
        }
    }

    /// Every replica, in node order.
    pub fn replicas(&self) -> Vec<&Replica> {
        self.scenario
            .node_ids()
            .into_iter()
            .filter_map(|id| self.replica(id))
            .collect()
    }

    pub fn is_finished(&self) -> bool {
        self.next_event_time().is_none()
    }

    /// Time of the next event within the scenario duration.
    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue
            .peek()
            .map(|Reverse(q)| q.time)
            .filter(|t| *t <= self.scenario.duration)
    }

    /// Processes one event. Returns its time, or `None` when the run is over.
    pub fn step(&mut self) -> Option<SimTime> {
        self.next_event_time()?;
        let Reverse(q) = self.queue.pop()?;
        self.now = q.time;
        self.handle(q.node, q.event);
        Some(self.now)
    }

    /// Processes every event up to and including `until` and advances the
    /// clock there (capped at the scenario duration).
    pub fn run_until(&mut self, until: SimTime) {
        while self.next_event_time().is_some_and(|t| t <= until) {
            self.step();
        }
        self.now = self.now.max(until.min(self.scenario.duration));
    }

    pub fn run_to_end(&mut self) {
        while self.step().is_some() {}
    }

    /// Applies an operator command at the current time.
    pub fn command(&mut self, action: Action) -> Result<(), EngineError> {
        for n in action.referenced_nodes() {
            if !self.scenario.declares(n) {
                return Err(EngineError::Invalid(format!("undeclared node {n}")));
            }
        }
        validate_action(&self.scenario, &action, &mut self.key_owner)
            .map_err(EngineError::Invalid)?;
        self.perform(action)
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        let devices = self
            .device_modes
            .iter()
            .map(|(id, mode)| {
                let replica = &self.replicas[id];
                let peers: BTreeSet<NodeId> = self
                    .topology
                    .up_links_of(*id)
                    .filter_map(|l| l.other(*id))
                    .collect();
                DeviceView {
                    id: *id,
                    mode: *mode,
                    peers: peers.into_iter().collect(),
                    messages: replica.state().len(),
                    held: replica.held().count(),
                }
            })
            .collect();
        EngineSnapshot {
            scenario: self.scenario.name.clone(),
            time: self.now,
            server_down: self.topology.server_down(),
            city: self.center.aggregate.snapshot(),
            devices,
            links: self
                .topology
                .links()
                .iter()
                .map(|l| LinkView {
                    id: l.id,
                    a: l.a,
                    b: l.b,
                    kind: l.kind,
                    up: self.topology.is_up(l),
                })
                .collect(),
        }
    }

    pub fn report(&self) -> MetricsReport {
        let nodes = self.scenario.node_ids();
        let mut latencies = Vec::new();
        let mut undelivered = Vec::new();
        for (id, rec) in &self.posts {
            let name = self.msg_name(id);
            for (replica, at) in &rec.reached {
                latencies.push(LatencySample {
                    msg: name.clone(),
                    replica: *replica,
                    posted: rec.posted,
                    received: *at,
                    latency_ms: at.saturating_sub(rec.posted),
                });
            }
            for n in &nodes {
                if *n != rec.origin && !rec.reached.contains_key(n) {
                    undelivered.push(Undelivered {
                        msg: name.clone(),
                        replica: *n,
                    });
                }
            }
        }
        let mut unaccounted = 0;
        for replica in self.replicas() {
            for m in replica.state().messages() {
                let accounted = self.posts.get(&m.id).is_some_and(|rec| {
                    rec.origin == replica.owner() || rec.reached.contains_key(&replica.owner())
                });
                if !accounted {
                    unaccounted += 1;
                }
            }
        }
        MetricsReport {
            scenario: self.scenario.name.clone(),
            seed: self.scenario.seed,
            end_time: self.now,
            posted: self.posts.len(),
            latencies,
            undelivered,
            unaccounted,
            convergence_ms: self.convergence_ms,
            sizes: self.sizes.clone(),
            frames_per_link: self.frames_per_link.clone(),
            round_trips: self.round_trips.clone(),
        }
    }

    pub fn finish(mut self) -> RunOutput {
        self.run_to_end();
        RunOutput {
            report: self.report(),
            trace: self.trace,
        }
    }

    fn msg_name(&self, id: &MsgId) -> String {
        match self.key_names.get(&id.author) {
            Some(name) => format!("{name}:{}", id.seq),
            None => id.to_string(),
        }
    }

    fn schedule(&mut self, time: SimTime, node: NodeId, event: Pending) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued {
            time,
            seq,
            node,
            event,
        }));
    }

    fn record(&mut self, r: TraceRecord) {
        self.trace.push(r);
    }

    fn handle(&mut self, node: NodeId, event: Pending) {
        match event {
            Pending::Act(action) => {
                let shown = action.to_string();
                if let Err(e) = self.perform(action) {
                    self.record(TraceRecord::Rejected {
                        time: self.now,
                        action: shown,
                        reason: e.to_string(),
                    });
                }
            }
            Pending::Sample { epoch } => self.on_sample(node, epoch),
            Pending::FrameArrive(frame) => {
                // stale frames are dropped by the aggregate
                let _ = self.center.aggregate.ingest(Ingest::Frame(frame));
            }
            Pending::AlertArrive(alert) => {
                if self.center.aggregate.ingest(Ingest::Alert(alert)).is_ok() {
                    self.record(TraceRecord::AlertReceived {
                        time: self.now,
                        source: alert.source,
                        cause: alert.cause,
                    });
                }
            }
            Pending::CommandArrive(d) => self.on_command(d),
            Pending::PushArrive { light } => self.on_push(light, node),
            Pending::SyncRound => {
                let next = self.now.plus_millis(self.scenario.sync_interval_ms);
                self.schedule(next, node, Pending::SyncRound);
                self.gossip(node);
            }
            Pending::SyncArrive { from, link, state } => self.on_sync(from, node, link, &state),
            Pending::AckArrive { msg, acked_by } => {
                if let Some(rec) = self.posts.get(&msg) {
                    let rtt_ms = self.now.saturating_sub(rec.posted);
                    self.round_trips.push(RoundTrip {
                        msg: self.msg_name(&msg),
                        acked_by,
                        posted: rec.posted,
                        rtt_ms,
                    });
                    self.record(TraceRecord::Ack {
                        time: self.now,
                        msg: self.msg_name(&msg),
                        acked_by,
                        rtt_ms,
                    });
                }
            }
            Pending::SizeSample => {
                for id in self.scenario.node_ids() {
                    let Some(r) = self.replica(id) else { continue };
                    let sample = SizeSample {
                        time: self.now,
                        node: id,
                        messages: r.state().len(),
                        bytes: r.state().encoded_size(),
                    };
                    self.record(TraceRecord::Size {
                        time: self.now,
                        node: id,
                        messages: sample.messages,
                        bytes: sample.bytes,
                    });
                    self.sizes.push(sample);
                }
                let next = self.now.plus_millis(self.scenario.size_sample_interval_ms);
                self.schedule(next, node, Pending::SizeSample);
            }
        }
    }

    fn perform(&mut self, action: Action) -> Result<(), EngineError> {
        let now = self.now;
        self.record(TraceRecord::Action {
            time: now,
            action: action.clone(),
        });
        match action {
            Action::VisionEvent { light } => {
                self.light_mut(light)?
                    .node
                    .environment_mut()
                    .add_vision_event(now);
            }
            Action::EnvRamp {
                light,
                sensor,
                target,
                duration_ms,
            } => {
                self.light_mut(light)?
                    .node
                    .environment_mut()
                    .add_ramp(Ramp {
                        sensor,
                        start: now,
                        duration_ms,
                        target,
                    });
            }
            Action::ServerDown => self.fail(Failure::ServerDown)?,
            Action::ServerUp => self.recover(Recovery::ServerUp)?,
            Action::LinkCut { a, b } => self.fail(Failure::LinkCut { a, b })?,
            Action::LinkRestore { a, b } => self.recover(Recovery::LinkRestore { a, b })?,
            Action::Partition { side } => self.fail(Failure::Partition { side })?,
            Action::Heal { side } => {
                self.recover(Recovery::Heal { side })?;
                self.last_heal = Some(now);
                self.convergence_ms = None;
                self.check_convergence();
            }
            Action::IssueAlarm { region, cause } => {
                let (dispatch, bulletin) = self.center.issue_alarm(&region, cause, now)?;
                let center = self.center.id;
                self.record_post(center, bulletin.id, &bulletin.body, true);
                self.send_dispatches(dispatch)?;
            }
            Action::RevokeAlarm { region } => {
                let dispatch = self.center.revoke_alarm(&region)?;
                self.send_dispatches(dispatch)?;
            }
            Action::SetGuidance { light, state } => {
                let d = self.center.aggregate.set_guidance(light, state)?;
                self.send_dispatches(vec![d])?;
            }
            Action::PairDevices {
                a,
                b,
                token_a,
                token_b,
            } => {
                self.topology
                    .pair_manual(a, b, token_a.as_bytes(), token_b.as_bytes())?;
                self.record(TraceRecord::D2dLink { time: now, a, b });
            }
            Action::PostMessage {
                device,
                key,
                body,
                signature_valid,
            } => {
                let m = self.replica_mut(device)?.post(
                    KeyId::derive(&key),
                    now,
                    body.into_bytes(),
                    signature_valid,
                )?;
                self.record_post(device, m.id, &m.body, signature_valid);
            }
            Action::Approve {
                replica,
                key,
                seq,
                approve,
            } => {
                let id = MsgId {
                    author: KeyId::derive(&key),
                    seq,
                };
                let status = self.replica_mut(replica)?.approve(&id, approve)?;
                self.record(TraceRecord::Reviewed {
                    time: now,
                    msg: self.msg_name(&id),
                    replica,
                    status,
                });
            }
            Action::Purge { target, horizon } => {
                let targets = match target {
                    PurgeTarget::All => self.scenario.node_ids(),
                    PurgeTarget::Node(n) => vec![n],
                };
                for n in targets {
                    if self.replica(n).is_some() {
                        self.replica_mut(n)?.purge(horizon)?;
                    }
                }
                self.check_convergence();
            }
            Action::Note { .. } => {}
        }
        Ok(())
    }

    fn light_mut(&mut self, id: NodeId) -> Result<&mut LightState, EngineError> {
        self.lights
            .get_mut(&id)
            .ok_or_else(|| EngineError::Invalid(format!("{id} is not a declared light")))
    }

    fn fail(&mut self, f: Failure) -> Result<(), EngineError> {
        let changed = self.topology.inject_failure(&f)?;
        self.record_links(&changed);
        Ok(())
    }

    fn recover(&mut self, r: Recovery) -> Result<(), EngineError> {
        let changed = self.topology.recover(&r)?;
        self.record_links(&changed);
        Ok(())
    }

    fn record_links(&mut self, changed: &[LinkId]) {
        for id in changed {
            let Ok(link) = self.topology.link(*id) else {
                continue;
            };
            let r = TraceRecord::LinkState {
                time: self.now,
                link: link.label(),
                up: self.topology.is_up(link),
            };
            self.record(r);
        }
    }

    fn record_post(&mut self, origin: NodeId, id: MsgId, body: &[u8], signature_valid: bool) {
        self.posts.insert(
            id,
            PostRecord {
                origin,
                posted: self.now,
                reached: BTreeMap::new(),
            },
        );
        self.record(TraceRecord::Posted {
            time: self.now,
            node: origin,
            msg: self.msg_name(&id),
            body: String::from_utf8_lossy(body).into_owned(),
            signature_valid,
        });
        self.check_convergence();
    }

    fn send_dispatches(&mut self, dispatch: Vec<Dispatch>) -> Result<(), EngineError> {
        let model = self.scenario.link_model.clone();
        for d in dispatch {
            let status = match self.topology.deliver(
                &model,
                self.center.id,
                d.light,
                CONTROL_BITS,
                self.now,
            )? {
                Delivery::Delivered { at, .. } => {
                    self.schedule(at, d.light, Pending::CommandArrive(d));
                    CommandStatus::Sent
                }
                Delivery::Undeliverable => CommandStatus::Undeliverable,
            };
            self.record(TraceRecord::Command {
                time: self.now,
                light: d.light,
                command: d.command,
                status,
            });
        }
        Ok(())
    }

    fn on_command(&mut self, d: Dispatch) {
        let now = self.now;
        let light = d.light;
        match d.command {
            LightCommand::Emergency { cause } => {
                let alert = CrisisAlert {
                    source: light,
                    time: now,
                    cause,
                };
                self.morph_light(light, Trigger::Crisis(alert));
            }
            LightCommand::AllClear => self.morph_light(light, Trigger::AllClear),
            LightCommand::Guidance { state } => {
                let Some(ls) = self.lights.get_mut(&light) else {
                    return;
                };
                match ls.node.set_guidance(state) {
                    Ok(ev) => self.record_light_event(ev),
                    Err(e) => {
                        self.record(TraceRecord::Rejected {
                            time: now,
                            action: format!("guidance {light} {state}"),
                            reason: e.to_string(),
                        });
                        return;
                    }
                }
            }
        }
        self.record(TraceRecord::Command {
            time: now,
            light,
            command: d.command,
            status: CommandStatus::Applied,
        });
        if let Some(ls) = self.lights.get(&light) {
            let (mode, guidance) = (ls.node.mode(), ls.node.guidance());
            self.center
                .aggregate
                .record_light_state(light, mode, guidance);
        }
    }

    fn record_light_event(&mut self, ev: LightEvent) {
        let time = self.now;
        let r = match ev {
            LightEvent::ModeChanged { light, from, to } => TraceRecord::ModeChanged {
                time,
                node: light,
                from,
                to,
            },
            LightEvent::GuidanceChanged { light, from, to } => TraceRecord::GuidanceChanged {
                time,
                light,
                from,
                to,
            },
            LightEvent::PushNotification { light, device } => TraceRecord::Push {
                time,
                light,
                device,
            },
        };
        self.record(r);
    }

    fn morph_light(&mut self, light: NodeId, trigger: Trigger) {
        let connected: Vec<NodeId> = self
            .topology
            .up_links_of(light)
            .filter(|l| l.kind == LinkKind::LightAP)
            .filter_map(|l| l.other(light))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let Some(ls) = self.lights.get_mut(&light) else {
            return;
        };
        let events = ls.node.morph(trigger, &connected);
        for ev in events {
            match ev {
                LightEvent::ModeChanged { .. } => {
                    let ls = self.lights.get_mut(&light).expect("light exists");
                    ls.epoch += 1;
                    let (t, epoch) = (ls.node.next_sample_time().max(self.now), ls.epoch);
                    self.schedule(t, light, Pending::Sample { epoch });
                }
                LightEvent::PushNotification { device, .. } => {
                    let model = &self.scenario.link_model;
                    let hop = self
                        .topology
                        .links_between(light, device)
                        .filter(|l| l.kind == LinkKind::LightAP && self.topology.is_up(l))
                        .filter_map(|l| model.hop_latency_ms(CONTROL_BITS, &l.profile))
                        .min_by(f64::total_cmp);
                    if let Some(ms) = hop {
                        let at = self.now.plus_millis(ms.ceil() as u64);
                        self.schedule(at, device, Pending::PushArrive { light });
                    }
                }
                LightEvent::GuidanceChanged { .. } => {}
            }
            self.record_light_event(ev);
        }
    }

    fn on_sample(&mut self, light: NodeId, epoch: u64) {
        let now = self.now;
        let center = self.center.id;
        let Some(ls) = self.lights.get_mut(&light) else {
            return;
        };
        if ls.epoch != epoch {
            return;
        }
        let frame = match ls.node.sample(now) {
            Ok(f) => f,
            Err(_) => {
                let due = ls.node.next_sample_time();
                self.schedule(due, light, Pending::Sample { epoch });
                return;
            }
        };
        ls.history.push(frame);
        let window = ls.window_ms;
        ls.history.retain(|f| now.saturating_sub(f.time) <= window);
        let alert = ls.node.evaluate_rules(&ls.history).ok().flatten();
        let fire_now = alert.is_some_and(|a| a.cause == AlertCause::FireRule);
        let raise = match alert {
            Some(a) if a.cause == AlertCause::FireRule => !ls.fire_active,
            Some(_) => true,
            None => false,
        };
        ls.fire_active = fire_now;
        let next = ls.node.next_sample_time();
        self.schedule(next, light, Pending::Sample { epoch });

        for kind in SensorKind::ALL {
            let r = TraceRecord::Sensor {
                time: now,
                topic: sensor_topic(light, kind),
                value: frame.reading(kind),
            };
            self.record(r);
        }
        let model = self.scenario.link_model.clone();
        match self
            .topology
            .deliver(&model, light, center, FRAME_BITS, now)
        {
            Ok(Delivery::Delivered { at, path, .. }) => {
                for id in path {
                    if let Ok(link) = self.topology.link(id) {
                        *self.frames_per_link.entry(link.label()).or_default() += 1;
                    }
                }
                self.schedule(at, center, Pending::FrameArrive(frame));
            }
            _ => self.record(TraceRecord::FrameUndeliverable { time: now, light }),
        }

        if let (Some(alert), true) = (alert, raise) {
            self.record(TraceRecord::Alert {
                time: now,
                source: light,
                cause: alert.cause,
            });
            self.morph_light(light, Trigger::Crisis(alert));
            if let Ok(Delivery::Delivered { at, .. }) =
                self.topology
                    .deliver(&model, light, center, CONTROL_BITS, now)
            {
                self.schedule(at, center, Pending::AlertArrive(alert));
            }
        }
    }

    fn on_push(&mut self, light: NodeId, device: NodeId) {
        self.enter_emergency(device);
        let _ = light;
        let Ok(peers) = self.topology.discover_peers(device) else {
            return;
        };
        for peer in peers {
            if let Ok((_, true)) = self.topology.connect_d2d(device, peer) {
                self.record(TraceRecord::D2dLink {
                    time: self.now,
                    a: device,
                    b: peer,
                });
            }
        }
    }

    fn enter_emergency(&mut self, device: NodeId) {
        if let Some(mode) = self.device_modes.get_mut(&device) {
            if *mode == Mode::Everyday {
                *mode = Mode::Emergency;
                self.trace.push(TraceRecord::ModeChanged {
                    time: self.now,
                    node: device,
                    from: Mode::Everyday,
                    to: Mode::Emergency,
                });
            }
        }
    }

    /// One anti-entropy round from `node` over each of its up links.
    fn gossip(&mut self, node: NodeId) {
        let Some(local) = self.replica(node) else {
            return;
        };
        let mut peers: BTreeMap<NodeId, Vec<LinkId>> = BTreeMap::new();
        for l in self.topology.up_links_of(node) {
            if let Some(p) = l.other(node) {
                peers.entry(p).or_default().push(l.id);
            }
        }
        let model = &self.scenario.link_model;
        let mut sends = Vec::new();
        for (peer, links) in peers {
            let Some(remote) = self.replica(peer) else {
                continue;
            };
            let offer = local.offer(remote.state().version());
            if offer.is_empty() && offer.purge_horizon() <= remote.state().purge_horizon() {
                continue;
            }
            let bits = offer.encoded_size() as u64 * 8;
            let best = links
                .iter()
                .filter_map(|id| {
                    let link = self.topology.link(*id).ok()?;
                    Some((model.hop_latency_ms(bits, &link.profile)?, *id))
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some((ms, link)) = best {
                let at = self.now.plus_millis(ms.ceil() as u64);
                sends.push((at, peer, link, offer));
            }
        }
        for (at, peer, link, state) in sends {
            self.schedule(
                at,
                peer,
                Pending::SyncArrive {
                    from: node,
                    link,
                    state,
                },
            );
        }
    }

    fn on_sync(&mut self, from: NodeId, to: NodeId, link: LinkId, state: &CrdtState) {
        let now = self.now;
        let up = self
            .topology
            .link(link)
            .is_ok_and(|l| self.topology.is_up(l));
        if !up {
            self.record(TraceRecord::SyncDropped {
                time: now,
                from,
                to,
            });
            return;
        }
        let Ok(replica) = self.replica_mut(to) else {
            return;
        };
        let received = replica.receive(state);
        let bulletins: Vec<bool> = received
            .iter()
            .map(|r| {
                replica
                    .state()
                    .message(&r.id)
                    .is_some_and(|m| m.body.starts_with(b"ALARM "))
            })
            .collect();
        self.record(TraceRecord::Sync {
            time: now,
            from,
            to,
            messages: state.len(),
            bytes: state.encoded_size(),
        });
        let model = self.scenario.link_model.clone();
        for (r, bulletin) in received.iter().zip(bulletins) {
            let name = self.msg_name(&r.id);
            let Some(rec) = self.posts.get_mut(&r.id) else {
                continue;
            };
            if rec.origin == to {
                continue;
            }
            let origin = rec.origin;
            let latency_ms = now.saturating_sub(rec.posted);
            rec.reached.entry(to).or_insert(now);
            self.record(TraceRecord::Delivered {
                time: now,
                msg: name.clone(),
                replica: to,
                latency_ms,
            });
            if r.status == ReviewStatus::Held {
                self.record(TraceRecord::Held {
                    time: now,
                    msg: name.clone(),
                    replica: to,
                });
            }
            if bulletin && to.is_device() {
                self.enter_emergency(to);
            }
            if self.scenario.ack_device == Some(to) && origin.is_device() && self.acked.insert(r.id)
            {
                match self.topology.deliver(&model, to, origin, CONTROL_BITS, now) {
                    Ok(Delivery::Delivered { at, .. }) => self.schedule(
                        at,
                        origin,
                        Pending::AckArrive {
                            msg: r.id,
                            acked_by: to,
                        },
                    ),
                    _ => self.record(TraceRecord::AckUndeliverable {
                        time: now,
                        msg: name,
                        acked_by: to,
                    }),
                }
            }
        }
        self.check_convergence();
    }

    fn check_convergence(&mut self) {
        let Some(heal) = self.last_heal else { return };
        if self.convergence_ms.is_some() {
            return;
        }
        let replicas = self.replicas();
        let Some(first) = replicas.first() else {
            return;
        };
        if replicas.iter().all(|r| r.state() == first.state()) {
            let after = self.now.saturating_sub(heal);
            self.convergence_ms = Some(after);
            self.record(TraceRecord::Converged {
                time: self.now,
                after_heal_ms: after,
            });
        }
    }
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<RunOutput, EngineError> {
    Ok(Engine::new(scenario.clone())?.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
[scenario]
name small
seed 3
duration 120000

[nodes]
center 0 pos 0 0
light 0 pos 30 0
light 1 pos 80 0
device 0
device 1
key resident untrusted
key medic trusted

[topology]
link light:0 center:0 covert dist=30
link light:0 light:1 covert dist=50
link device:0 light:1 ap dist=10
link device:1 light:1 ap dist=12

[events]
20000 post device:0 medic \"clinic open\"
30000 vision light:1
40000 post device:0 resident \"need water\"
";

    fn small() -> Scenario {
        Scenario::parse(SMALL).unwrap()
    }

    #[test]
    fn vision_event_morphs_and_pushes() {
        let out = run(&small()).unwrap();
        let morph = out.trace.iter().find_map(|r| match r {
            TraceRecord::ModeChanged { time, node, to, .. } if *node == NodeId::light(1) => {
                Some((*time, *to))
            }
            _ => None,
        });
        assert_eq!(morph, Some((SimTime(30_000), Mode::Emergency)));
        let pushes = out
            .trace
            .iter()
            .filter(|r| matches!(r, TraceRecord::Push { .. }))
            .count();
        assert_eq!(pushes, 2);
        // both devices share the light's access point, so discovery links them
        assert!(out
            .trace
            .iter()
            .any(|r| matches!(r, TraceRecord::D2dLink { .. })));
    }

    #[test]
    fn trusted_message_reaches_everyone_untrusted_is_held() {
        let out = run(&small()).unwrap();
        let r = &out.report;
        assert_eq!(r.posted, 2);
        assert_eq!(r.unaccounted, 0);
        let reached = |msg: &str| {
            r.latencies
                .iter()
                .filter(|l| l.msg == msg)
                .map(|l| l.replica)
                .collect::<BTreeSet<_>>()
        };
        assert_eq!(reached("medic:1").len(), 4);
        // light:1 and the d2d peer hold the untrusted message for review
        assert_eq!(
            reached("resident:1"),
            BTreeSet::from([NodeId::light(1), NodeId::device(1)])
        );
        assert_eq!(r.latencies.len() + r.undelivered.len(), 2 * 4);
    }

    #[test]
    fn frames_counted_per_link() {
        let out = run(&small()).unwrap();
        let f = &out.report.frames_per_link;
        // light:0 is everyday throughout: 4 frames in 120 s
        assert_eq!(
            f["light:0-center:0/covert"],
            4 + f["light:0-light:1/covert"]
        );
    }

    #[test]
    fn same_scenario_same_trace() {
        let a = run(&small()).unwrap();
        let b = run(&small()).unwrap();
        assert_eq!(trace_jsonl(&a.trace), trace_jsonl(&b.trace));
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn operator_commands_apply_now() {
        let mut e = Engine::new(small()).unwrap();
        e.run_until(SimTime(10_000));
        assert!(e
            .command(Action::RevokeAlarm {
                region: BTreeSet::from([NodeId::light(0)])
            })
            .is_err());
        e.command(Action::IssueAlarm {
            region: BTreeSet::from([NodeId::light(0)]),
            cause: AlertCause::OperatorAlarm,
        })
        .unwrap();
        e.run_until(SimTime(11_000));
        assert_eq!(e.light(NodeId::light(0)).unwrap().mode(), Mode::Emergency);
        let snap = e.snapshot();
        assert_eq!(snap.time, SimTime(11_000));
        assert_eq!(snap.city.alarms.len(), 1);
        assert_eq!(snap.devices.len(), 2);
        assert!(e
            .command(Action::VisionEvent {
                light: NodeId::light(9)
            })
            .is_err());
    }
}
