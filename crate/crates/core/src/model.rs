//! Shared domain types: node identities, simulated time, sensor frames and
//! the operating modes of a street light.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of payload bytes in an encoded [`SensorFrame`].
pub const FRAME_BYTES: usize = 24;
/// Number of payload bits in an encoded [`SensorFrame`].
pub const FRAME_BITS: u64 = (FRAME_BYTES * 8) as u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    StreetLight,
    CitizenDevice,
    CommandCenter,
}

impl NodeKind {
    pub fn prefix(self) -> &'static str {
        match self {
            NodeKind::StreetLight => "light",
            NodeKind::CitizenDevice => "device",
            NodeKind::CommandCenter => "center",
        }
    }
}

/// Identity of a simulated node. Rendered and parsed as `light:3`,
/// `device:0`, `center:0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub kind: NodeKind,
    pub index: u32,
}

impl NodeId {
    pub const fn new(kind: NodeKind, index: u32) -> Self {
        Self { kind, index }
    }

    pub const fn light(index: u32) -> Self {
        Self::new(NodeKind::StreetLight, index)
    }

    pub const fn device(index: u32) -> Self {
        Self::new(NodeKind::CitizenDevice, index)
    }

    pub const fn center(index: u32) -> Self {
        Self::new(NodeKind::CommandCenter, index)
    }

    pub fn is_light(&self) -> bool {
        self.kind == NodeKind::StreetLight
    }

    pub fn is_device(&self) -> bool {
        self.kind == NodeKind::CitizenDevice
    }

    pub fn is_center(&self) -> bool {
        self.kind == NodeKind::CommandCenter
    }

    /// Lights and the command center form the infrastructure side of the
    /// covert mesh.
    pub fn is_infrastructure(&self) -> bool {
        !self.is_device()
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.prefix(), self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid node id `{0}` (expected light:N, device:N or center:N)")]
pub struct NodeIdParseError(pub String);

impl FromStr for NodeId {
    type Err = NodeIdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || NodeIdParseError(s.to_string());
        let (kind, index) = s.split_once(':').ok_or_else(err)?;
        let kind = match kind {
            "light" => NodeKind::StreetLight,
            "device" => NodeKind::CitizenDevice,
            "center" => NodeKind::CommandCenter,
            _ => return Err(err()),
        };
        let index = index.parse().map_err(|_| err())?;
        Ok(NodeId { kind, index })
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Milliseconds since scenario start.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1000)
    }

    pub const fn millis(self) -> u64 {
        self.0
    }

    pub const fn plus_millis(self, ms: u64) -> Self {
        SimTime(self.0 + ms)
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

/// The six sensors of a street light, in wire-encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorKind {
    Motion,
    InfraredLight,
    BroadbandLight,
    Temperature,
    Humidity,
    Co2,
}

impl SensorKind {
    pub const ALL: [SensorKind; 6] = [
        SensorKind::Motion,
        SensorKind::InfraredLight,
        SensorKind::BroadbandLight,
        SensorKind::Temperature,
        SensorKind::Humidity,
        SensorKind::Co2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Short name used in topics and scenario files.
    pub fn name(self) -> &'static str {
        match self {
            SensorKind::Motion => "motion",
            SensorKind::InfraredLight => "infrared",
            SensorKind::BroadbandLight => "broadband",
            SensorKind::Temperature => "temperature",
            SensorKind::Humidity => "humidity",
            SensorKind::Co2 => "co2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("reading for {0} is not finite")]
    NonFinite(SensorKind),
    #[error("frame payload must be {FRAME_BYTES} bytes, got {0}")]
    WrongLength(usize),
}

/// One timestamped vector of the six readings of one light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub light: NodeId,
    pub time: SimTime,
    pub readings: [f32; 6],
}

impl SensorFrame {
    pub fn reading(&self, kind: SensorKind) -> f32 {
        self.readings[kind.index()]
    }
}

/// Encodes the readings as six big-endian IEEE-754 singles. Identity and
/// timestamp travel in framing, not in the payload.
pub fn encode_frame(frame: &SensorFrame) -> Result<[u8; FRAME_BYTES], FrameError> {
    let mut out = [0u8; FRAME_BYTES];
    for kind in SensorKind::ALL {
        let value = frame.reading(kind);
        if !value.is_finite() {
            return Err(FrameError::NonFinite(kind));
        }
        let at = kind.index() * 4;
        out[at..at + 4].copy_from_slice(&value.to_be_bytes());
    }
    Ok(out)
}

pub fn decode_frame(bytes: &[u8], light: NodeId, time: SimTime) -> Result<SensorFrame, FrameError> {
    if bytes.len() != FRAME_BYTES {
        return Err(FrameError::WrongLength(bytes.len()));
    }
    let mut readings = [0f32; 6];
    for (slot, chunk) in readings.iter_mut().zip(bytes.chunks_exact(4)) {
        *slot = f32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    Ok(SensorFrame {
        light,
        time,
        readings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Everyday,
    Emergency,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Everyday => "everyday",
            Mode::Emergency => "emergency",
        })
    }
}

/// State of the light ring on a street light.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceState {
    Off,
    Available,
    OutOfOrder,
    Charging,
    /// Green.
    SafeDirection,
    /// Red.
    Blocked,
}

impl GuidanceState {
    pub const ALL: [GuidanceState; 6] = [
        GuidanceState::Off,
        GuidanceState::Available,
        GuidanceState::OutOfOrder,
        GuidanceState::Charging,
        GuidanceState::SafeDirection,
        GuidanceState::Blocked,
    ];

    /// `Off` is valid in both modes; the service states belong to everyday
    /// operation and the direction signals to emergencies.
    pub fn permitted_in(self, mode: Mode) -> bool {
        match self {
            GuidanceState::Off => true,
            GuidanceState::Available | GuidanceState::OutOfOrder | GuidanceState::Charging => {
                mode == Mode::Everyday
            }
            GuidanceState::SafeDirection | GuidanceState::Blocked => mode == Mode::Emergency,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GuidanceState::Off => "off",
            GuidanceState::Available => "available",
            GuidanceState::OutOfOrder => "out-of-order",
            GuidanceState::Charging => "charging",
            GuidanceState::SafeDirection => "safe-direction",
            GuidanceState::Blocked => "blocked",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "safe" | "green" => Some(GuidanceState::SafeDirection),
            "red" => Some(GuidanceState::Blocked),
            _ => Self::ALL.into_iter().find(|g| g.name() == name),
        }
    }
}

impl fmt::Display for GuidanceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
