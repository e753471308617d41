//! Simulated transports: the distance/throughput link model, topology with
//! up/down links, minimum-latency routing, discovery, manual pairing and
//! failure injection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{NodeId, SimTime};

pub const MAX_DISTANCE_M: f64 = 100.0;
pub const DEFAULT_PROCESSING_MS: f64 = 5.0;
/// Measured (distance m, kbit/s) anchors of the covert channel.
pub const DEFAULT_ANCHORS: [(f64, f64); 3] = [(1.0, 96.0), (10.0, 92.0), (50.0, 88.0)];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("distance {0} m is outside (0, {MAX_DISTANCE_M}]")]
    Distance(f64),
    #[error("covert links must be encrypted")]
    UnencryptedCovert,
    #[error("invalid throughput anchors: {0}")]
    Anchors(String),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("duplicate node {0}")]
    DuplicateNode(NodeId),
    #[error("unknown link {0}")]
    UnknownLink(LinkId),
    #[error("no link between {0} and {1}")]
    NoLink(NodeId, NodeId),
    #[error("self-link on {0}")]
    SelfLink(NodeId),
    #[error("{kind} link cannot join {a} and {b}")]
    BadEndpoints {
        kind: LinkKind,
        a: NodeId,
        b: NodeId,
    },
    #[error("{0} is not a citizen device")]
    NotADevice(NodeId),
    #[error("pairing tokens do not match")]
    TokenMismatch,
    #[error("source and destination are both {0}")]
    SameEndpoints(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BandwidthMode {
    Narrow8MHz,
    Mid16MHz,
    Standard20MHz,
}

impl BandwidthMode {
    pub const ALL: [BandwidthMode; 3] = [
        BandwidthMode::Narrow8MHz,
        BandwidthMode::Mid16MHz,
        BandwidthMode::Standard20MHz,
    ];

    /// Off-standard modes are invisible to ordinary receivers.
    pub fn is_covert(self) -> bool {
        self != BandwidthMode::Standard20MHz
    }

    pub fn mhz(self) -> u32 {
        match self {
            BandwidthMode::Narrow8MHz => 8,
            BandwidthMode::Mid16MHz => 16,
            BandwidthMode::Standard20MHz => 20,
        }
    }

    pub fn from_mhz(mhz: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.mhz() == mhz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub mode: BandwidthMode,
    pub distance_m: f64,
    pub encrypted: bool,
}

impl LinkProfile {
    pub fn new(mode: BandwidthMode, distance_m: f64, encrypted: bool) -> Result<Self, NetError> {
        check_distance(distance_m)?;
        if mode.is_covert() && !encrypted {
            return Err(NetError::UnencryptedCovert);
        }
        Ok(Self {
            mode,
            distance_m,
            encrypted,
        })
    }

    pub fn covert(distance_m: f64) -> Result<Self, NetError> {
        Self::new(BandwidthMode::Narrow8MHz, distance_m, true)
    }

    pub fn public(distance_m: f64) -> Result<Self, NetError> {
        Self::new(BandwidthMode::Standard20MHz, distance_m, false)
    }
}

fn check_distance(d: f64) -> Result<(), NetError> {
    if d > 0.0 && d <= MAX_DISTANCE_M {
        Ok(())
    } else {
        Err(NetError::Distance(d))
    }
}

/// Piecewise-linear distance-to-throughput curve. Flat below the first
/// anchor, extrapolated from the last segment beyond the last anchor and
/// floored at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputModel {
    anchors: Vec<(f64, f64)>,
}

impl Default for ThroughputModel {
    fn default() -> Self {
        Self {
            anchors: DEFAULT_ANCHORS.to_vec(),
        }
    }
}

impl ThroughputModel {
    pub fn new(anchors: Vec<(f64, f64)>) -> Result<Self, NetError> {
        if anchors.len() < 2 {
            return Err(NetError::Anchors("need at least two anchors".into()));
        }
        for w in anchors.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(NetError::Anchors(
                    "distances must be strictly increasing".into(),
                ));
            }
            if w[1].1 > w[0].1 {
                return Err(NetError::Anchors(
                    "throughput must not increase with distance".into(),
                ));
            }
        }
        if anchors.iter().any(|(d, t)| *d <= 0.0 || *t < 0.0) {
            return Err(NetError::Anchors("anchors must be positive".into()));
        }
        Ok(Self { anchors })
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    /// Throughput in kbit/s at `distance_m`. The bandwidth mode plays no part.
    pub fn kbps_at(&self, distance_m: f64) -> Result<f64, NetError> {
        check_distance(distance_m)?;
        let a = &self.anchors;
        let (d0, t0) = a[0];
        if distance_m <= d0 {
            return Ok(t0);
        }
        let segment = a
            .windows(2)
            .find(|w| distance_m <= w[1].0)
            .unwrap_or(&a[a.len() - 2..]);
        let ((da, ta), (db, tb)) = (segment[0], segment[1]);
        if distance_m == db {
            return Ok(tb);
        }
        let t = ta + (tb - ta) * (distance_m - da) / (db - da);
        Ok(t.max(0.0))
    }

    pub fn link_throughput(&self, p: &LinkProfile) -> Result<f64, NetError> {
        self.kbps_at(p.distance_m)
    }

    /// Seconds to move `payload_bits` across one link.
    pub fn transmit_time(&self, payload_bits: u64, p: &LinkProfile) -> Result<f64, NetError> {
        if payload_bits == 0 {
            return Err(NetError::NonPositive {
                name: "payload_bits",
                value: 0.0,
            });
        }
        let kbps = self.link_throughput(p)?;
        Ok(payload_bits as f64 / (kbps * 1000.0))
    }
}

pub fn link_throughput(p: &LinkProfile) -> Result<f64, NetError> {
    ThroughputModel::default().link_throughput(p)
}

pub fn transmit_time(payload_bits: u64, p: &LinkProfile) -> Result<f64, NetError> {
    ThroughputModel::default().transmit_time(payload_bits, p)
}

/// Sustained sensor upload rate in kbit/s.
pub fn sensor_bitrate(
    n_sensors: u32,
    bits_per_reading: u32,
    interval_s: f64,
) -> Result<f64, NetError> {
    positive("n_sensors", f64::from(n_sensors))?;
    positive("bits_per_reading", f64::from(bits_per_reading))?;
    positive("interval_s", interval_s)?;
    let bits = u64::from(n_sensors) * u64::from(bits_per_reading);
    Ok(bits as f64 / (interval_s * 1000.0))
}

/// Number of nodes at `per_node_kbps` that fit into one link.
pub fn capacity_budget(link_kbps: f64, per_node_kbps: f64) -> Result<u64, NetError> {
    positive("link_kbps", link_kbps)?;
    positive("per_node_kbps", per_node_kbps)?;
    Ok((link_kbps / per_node_kbps).floor() as u64)
}

fn positive(name: &'static str, value: f64) -> Result<(), NetError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(NetError::NonPositive { name, value })
    }
}

/// Throughput curve plus the fixed per-hop processing cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub throughput: ThroughputModel,
    pub processing_ms: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            throughput: ThroughputModel::default(),
            processing_ms: DEFAULT_PROCESSING_MS,
        }
    }
}

impl LinkModel {
    /// Milliseconds for one hop, or `None` if the link carries nothing.
    pub fn hop_latency_ms(&self, payload_bits: u64, p: &LinkProfile) -> Option<f64> {
        let kbps = self.throughput.link_throughput(p).ok()?;
        if kbps <= 0.0 {
            return None;
        }
        let bits = payload_bits.max(1) as f64;
        Some(bits / kbps + self.processing_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkKind {
    ClientServer,
    LightAP,
    CovertMesh,
    DeviceToDevice,
}

impl LinkKind {
    pub fn name(self) -> &'static str {
        match self {
            LinkKind::ClientServer => "server",
            LinkKind::LightAP => "ap",
            LinkKind::CovertMesh => "covert",
            LinkKind::DeviceToDevice => "d2d",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            LinkKind::ClientServer,
            LinkKind::LightAP,
            LinkKind::CovertMesh,
            LinkKind::DeviceToDevice,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }

    fn accepts(self, a: NodeId, b: NodeId) -> bool {
        let pair =
            |x: fn(&NodeId) -> bool, y: fn(&NodeId) -> bool| (x(&a) && y(&b)) || (x(&b) && y(&a));
        match self {
            LinkKind::ClientServer => pair(NodeId::is_device, NodeId::is_center),
            LinkKind::LightAP => pair(NodeId::is_device, NodeId::is_light),
            LinkKind::CovertMesh => a.is_infrastructure() && b.is_infrastructure(),
            LinkKind::DeviceToDevice => a.is_device() && b.is_device(),
        }
    }
}

impl fmt::Display for LinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub usize);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "link#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    pub kind: LinkKind,
    pub profile: LinkProfile,
    pub up: bool,
}

impl Link {
    pub fn other(&self, n: NodeId) -> Option<NodeId> {
        if self.a == n {
            Some(self.b)
        } else if self.b == n {
            Some(self.a)
        } else {
            None
        }
    }

    pub fn joins(&self, x: NodeId, y: NodeId) -> bool {
        (self.a == x && self.b == y) || (self.a == y && self.b == x)
    }

    /// `a-b/kind`, used in reports.
    pub fn label(&self) -> String {
        format!("{}-{}/{}", self.a, self.b, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Failure {
    ServerDown,
    LinkCut { a: NodeId, b: NodeId },
    Partition { side: BTreeSet<NodeId> },
}

/// Inverse operations of [`Failure`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Recovery {
    ServerUp,
    LinkRestore { a: NodeId, b: NodeId },
    Heal { side: BTreeSet<NodeId> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Delivery {
    Delivered {
        at: SimTime,
        latency_ms: f64,
        path: Vec<LinkId>,
    },
    Undeliverable,
}

impl Delivery {
    pub fn is_delivered(&self) -> bool {
        matches!(self, Delivery::Delivered { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    nodes: BTreeSet<NodeId>,
    links: Vec<Link>,
    server_down: bool,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: NodeId) -> Result<(), NetError> {
        if !self.nodes.insert(id) {
            return Err(NetError::DuplicateNode(id));
        }
        Ok(())
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains(&id)
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> Result<&Link, NetError> {
        self.links.get(id.0).ok_or(NetError::UnknownLink(id))
    }

    pub fn server_down(&self) -> bool {
        self.server_down
    }

    pub fn add_link(
        &mut self,
        a: NodeId,
        b: NodeId,
        kind: LinkKind,
        profile: LinkProfile,
    ) -> Result<LinkId, NetError> {
        self.require(a)?;
        self.require(b)?;
        if a == b {
            return Err(NetError::SelfLink(a));
        }
        if !kind.accepts(a, b) {
            return Err(NetError::BadEndpoints { kind, a, b });
        }
        if kind == LinkKind::CovertMesh && !profile.mode.is_covert() {
            return Err(NetError::BadEndpoints { kind, a, b });
        }
        let profile = LinkProfile::new(profile.mode, profile.distance_m, profile.encrypted)?;
        let id = LinkId(self.links.len());
        self.links.push(Link {
            id,
            a,
            b,
            kind,
            profile,
            up: true,
        });
        Ok(id)
    }

    fn require(&self, id: NodeId) -> Result<(), NetError> {
        if self.nodes.contains(&id) {
            Ok(())
        } else {
            Err(NetError::UnknownNode(id))
        }
    }

    /// Effective state: client-server links stay dark while the server is down.
    pub fn is_up(&self, link: &Link) -> bool {
        link.up && !(self.server_down && link.kind == LinkKind::ClientServer)
    }

    pub fn up_links(&self) -> impl Iterator<Item = &Link> {
        self.links.iter().filter(|l| self.is_up(l))
    }

    pub fn up_links_of(&self, n: NodeId) -> impl Iterator<Item = &Link> + '_ {
        self.up_links().filter(move |l| l.other(n).is_some())
    }

    pub fn links_between(&self, x: NodeId, y: NodeId) -> impl Iterator<Item = &Link> + '_ {
        self.links.iter().filter(move |l| l.joins(x, y))
    }

    /// Creates (or revives) a direct device-to-device link. Idempotent.
    pub fn connect_d2d(&mut self, a: NodeId, b: NodeId) -> Result<(LinkId, bool), NetError> {
        for n in [a, b] {
            self.require(n)?;
            if !n.is_device() {
                return Err(NetError::NotADevice(n));
            }
        }
        if let Some(link) = self
            .links
            .iter_mut()
            .find(|l| l.kind == LinkKind::DeviceToDevice && l.joins(a, b))
        {
            let created = !link.up;
            link.up = true;
            return Ok((link.id, created));
        }
        let profile = LinkProfile::public(10.0).expect("valid default profile");
        let id = self.add_link(a, b, LinkKind::DeviceToDevice, profile)?;
        Ok((id, true))
    }

    /// Devices sharing an up relay (the central server or a light access
    /// point) with `device`.
    pub fn discover_peers(&self, device: NodeId) -> Result<BTreeSet<NodeId>, NetError> {
        self.require(device)?;
        if !device.is_device() {
            return Err(NetError::NotADevice(device));
        }
        let relays: BTreeSet<(NodeId, LinkKind)> = self
            .up_links_of(device)
            .filter(|l| matches!(l.kind, LinkKind::ClientServer | LinkKind::LightAP))
            .filter_map(|l| l.other(device).map(|r| (r, l.kind)))
            .collect();
        let mut peers = BTreeSet::new();
        for (relay, kind) in relays {
            for l in self.up_links_of(relay).filter(|l| l.kind == kind) {
                if let Some(peer) = l.other(relay) {
                    if peer != device && peer.is_device() {
                        peers.insert(peer);
                    }
                }
            }
        }
        Ok(peers)
    }

    /// Out-of-band pairing (QR code, file exchange). Works without any
    /// other connectivity.
    pub fn pair_manual(
        &mut self,
        a: NodeId,
        b: NodeId,
        token_a: &[u8],
        token_b: &[u8],
    ) -> Result<LinkId, NetError> {
        for n in [a, b] {
            self.require(n)?;
            if !n.is_device() {
                return Err(NetError::NotADevice(n));
            }
        }
        if token_a != token_b {
            return Err(NetError::TokenMismatch);
        }
        self.connect_d2d(a, b).map(|(id, _)| id)
    }

    /// Applies a failure and returns the links whose effective state changed.
    pub fn inject_failure(&mut self, failure: &Failure) -> Result<Vec<LinkId>, NetError> {
        let before: Vec<bool> = self.links.iter().map(|l| self.is_up(l)).collect();
        match failure {
            Failure::ServerDown => self.server_down = true,
            Failure::LinkCut { a, b } => self.set_between(*a, *b, false)?,
            Failure::Partition { side } => self.set_crossing(side, false)?,
        }
        Ok(self.changed(&before))
    }

    pub fn recover(&mut self, recovery: &Recovery) -> Result<Vec<LinkId>, NetError> {
        let before: Vec<bool> = self.links.iter().map(|l| self.is_up(l)).collect();
        match recovery {
            Recovery::ServerUp => self.server_down = false,
            Recovery::LinkRestore { a, b } => self.set_between(*a, *b, true)?,
            Recovery::Heal { side } => self.set_crossing(side, true)?,
        }
        Ok(self.changed(&before))
    }

    fn changed(&self, before: &[bool]) -> Vec<LinkId> {
        self.links
            .iter()
            .zip(before)
            .filter(|(l, was)| self.is_up(l) != **was)
            .map(|(l, _)| l.id)
            .collect()
    }

    fn set_between(&mut self, a: NodeId, b: NodeId, up: bool) -> Result<(), NetError> {
        self.require(a)?;
        self.require(b)?;
        let mut found = false;
        for l in self.links.iter_mut().filter(|l| l.joins(a, b)) {
            l.up = up;
            found = true;
        }
        if found {
            Ok(())
        } else {
            Err(NetError::NoLink(a, b))
        }
    }

    fn set_crossing(&mut self, side: &BTreeSet<NodeId>, up: bool) -> Result<(), NetError> {
        for n in side {
            self.require(*n)?;
        }
        for l in self
            .links
            .iter_mut()
            .filter(|l| side.contains(&l.a) != side.contains(&l.b))
        {
            l.up = up;
        }
        Ok(())
    }

    /// Whether traffic between `from` and `to` may take this hop.
    fn hop_allowed(&self, link: &Link, from: NodeId, to: NodeId) -> bool {
        self.is_up(link)
            && !(link.kind == LinkKind::CovertMesh && (from.is_device() || to.is_device()))
    }

    /// Minimum-latency route over up links.
    pub fn deliver(
        &self,
        model: &LinkModel,
        from: NodeId,
        to: NodeId,
        payload_bits: u64,
        now: SimTime,
    ) -> Result<Delivery, NetError> {
        self.require(from)?;
        self.require(to)?;
        if from == to {
            return Err(NetError::SameEndpoints(from));
        }
        let mut best: BTreeMap<NodeId, (f64, Vec<LinkId>)> = BTreeMap::new();
        let mut queue = BinaryHeap::new();
        best.insert(from, (0.0, Vec::new()));
        queue.push(Frontier {
            cost: 0.0,
            node: from,
        });
        while let Some(Frontier { cost, node }) = queue.pop() {
            if best.get(&node).is_some_and(|(c, _)| *c < cost) {
                continue;
            }
            if node == to {
                break;
            }
            // citizen devices only originate or terminate traffic
            if node != from && node.is_device() {
                continue;
            }
            let path = best[&node].1.clone();
            for link in self.links.iter().filter(|l| self.hop_allowed(l, from, to)) {
                let Some(next) = link.other(node) else {
                    continue;
                };
                let Some(hop) = model.hop_latency_ms(payload_bits, &link.profile) else {
                    continue;
                };
                let candidate = cost + hop;
                if best.get(&next).is_none_or(|(c, _)| candidate < *c) {
                    let mut p = path.clone();
                    p.push(link.id);
                    best.insert(next, (candidate, p));
                    queue.push(Frontier {
                        cost: candidate,
                        node: next,
                    });
                }
            }
        }
        Ok(match best.remove(&to) {
            Some((latency_ms, path)) => Delivery::Delivered {
                at: now.plus_millis(latency_ms.ceil() as u64),
                latency_ms,
                path,
            },
            None => Delivery::Undeliverable,
        })
    }
}

#[derive(Debug, PartialEq)]
struct Frontier {
    cost: f64,
    node: NodeId,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    // min-heap on cost, ties by node id
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
