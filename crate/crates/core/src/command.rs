//! The command center: city-wide aggregate of frames and alerts, operator
//! alarms and their revocation, guidance commands, and the console view.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crdt::{AuthorKey, CrdtError, Message, Replica};
use crate::model::{GuidanceState, Mode, NodeId, SensorFrame, SensorKind, SimTime};
use crate::sensing::{AlertCause, CrisisAlert};

/// Alerts kept in the console view.
pub const RECENT_ALERTS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommandError {
    #[error("unknown source {0}")]
    UnknownSource(NodeId),
    #[error("{0} is not a street light")]
    NotALight(NodeId),
    #[error("alarm region is empty")]
    EmptyRegion,
    #[error("no active alarm covers the region")]
    NoMatchingAlarm,
    #[error("guidance `{state}` is not permitted while {light} is in {mode} mode")]
    Guidance {
        light: NodeId,
        state: GuidanceState,
        mode: Mode,
    },
    #[error(transparent)]
    Store(#[from] CrdtError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightView {
    pub position: (f64, f64),
    pub mode: Mode,
    pub guidance: GuidanceState,
    pub latest: Option<SensorFrame>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alarm {
    pub id: u64,
    pub region: BTreeSet<NodeId>,
    pub issued: SimTime,
    pub cause: AlertCause,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ingest {
    Frame(SensorFrame),
    Alert(CrisisAlert),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Updated,
    Stale,
    Logged,
}

/// What the center tells one light to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum LightCommand {
    Emergency { cause: AlertCause },
    AllClear,
    Guidance { state: GuidanceState },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispatch {
    pub light: NodeId,
    pub command: LightCommand,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CityAggregate {
    lights: BTreeMap<NodeId, LightView>,
    alarms: Vec<Alarm>,
    alert_log: Vec<CrisisAlert>,
    next_alarm: u64,
    center: Option<NodeId>,
}

impl CityAggregate {
    pub fn new(center: NodeId) -> Self {
        Self {
            center: Some(center),
            ..Self::default()
        }
    }

    pub fn register_light(&mut self, light: NodeId, position: (f64, f64)) {
        self.lights.insert(
            light,
            LightView {
                position,
                mode: Mode::Everyday,
                guidance: GuidanceState::Off,
                latest: None,
            },
        );
    }

    pub fn light(&self, id: &NodeId) -> Option<&LightView> {
        self.lights.get(id)
    }

    pub fn lights(&self) -> &BTreeMap<NodeId, LightView> {
        &self.lights
    }

    pub fn alarms(&self) -> &[Alarm] {
        &self.alarms
    }

    pub fn alert_log(&self) -> &[CrisisAlert] {
        &self.alert_log
    }

    pub fn ingest(&mut self, item: Ingest) -> Result<IngestOutcome, CommandError> {
        match item {
            Ingest::Frame(frame) => {
                let view = self
                    .lights
                    .get_mut(&frame.light)
                    .ok_or(CommandError::UnknownSource(frame.light))?;
                if view.latest.is_some_and(|l| l.time >= frame.time) {
                    return Ok(IngestOutcome::Stale);
                }
                view.latest = Some(frame);
                Ok(IngestOutcome::Updated)
            }
            Ingest::Alert(alert) => {
                let source = alert.source;
                if Some(source) != self.center && !self.lights.contains_key(&source) {
                    return Err(CommandError::UnknownSource(source));
                }
                self.alert_log.push(alert);
                if let Some(view) = self.lights.get_mut(&source) {
                    view.mode = Mode::Emergency;
                    if !view.guidance.permitted_in(Mode::Emergency) {
                        view.guidance = GuidanceState::Off;
                    }
                    // a local alert is tracked like an alarm so the operator can revoke it
                    if !self.alarms.iter().any(|a| a.region.contains(&source)) {
                        self.push_alarm(BTreeSet::from([source]), alert.time, alert.cause);
                    }
                }
                Ok(IngestOutcome::Logged)
            }
        }
    }

    fn push_alarm(&mut self, region: BTreeSet<NodeId>, issued: SimTime, cause: AlertCause) {
        self.next_alarm += 1;
        self.alarms.push(Alarm {
            id: self.next_alarm,
            region,
            issued,
            cause,
        });
    }

    fn check_region(&self, region: &BTreeSet<NodeId>) -> Result<(), CommandError> {
        if region.is_empty() {
            return Err(CommandError::EmptyRegion);
        }
        for n in region {
            if !n.is_light() {
                return Err(CommandError::NotALight(*n));
            }
            if !self.lights.contains_key(n) {
                return Err(CommandError::UnknownSource(*n));
            }
        }
        Ok(())
    }

    pub fn issue_alarm(
        &mut self,
        region: &BTreeSet<NodeId>,
        cause: AlertCause,
        now: SimTime,
    ) -> Result<Vec<Dispatch>, CommandError> {
        self.check_region(region)?;
        self.push_alarm(region.clone(), now, cause);
        Ok(region
            .iter()
            .map(|light| Dispatch {
                light: *light,
                command: LightCommand::Emergency { cause },
            })
            .collect())
    }

    /// Lifts every active alarm over the lights in `region`. Alarms that
    /// extend beyond the region shrink; emptied alarms are dropped.
    pub fn revoke_alarm(
        &mut self,
        region: &BTreeSet<NodeId>,
    ) -> Result<Vec<Dispatch>, CommandError> {
        self.check_region(region)?;
        if !self.alarms.iter().any(|a| !a.region.is_disjoint(region)) {
            return Err(CommandError::NoMatchingAlarm);
        }
        for alarm in &mut self.alarms {
            alarm.region.retain(|n| !region.contains(n));
        }
        self.alarms.retain(|a| !a.region.is_empty());
        Ok(region
            .iter()
            .map(|light| Dispatch {
                light: *light,
                command: LightCommand::AllClear,
            })
            .collect())
    }

    pub fn set_guidance(
        &self,
        light: NodeId,
        state: GuidanceState,
    ) -> Result<Dispatch, CommandError> {
        let view = self
            .lights
            .get(&light)
            .ok_or(CommandError::UnknownSource(light))?;
        if !state.permitted_in(view.mode) {
            return Err(CommandError::Guidance {
                light,
                state,
                mode: view.mode,
            });
        }
        Ok(Dispatch {
            light,
            command: LightCommand::Guidance { state },
        })
    }

    /// Reflects a state change confirmed by a light.
    pub fn record_light_state(&mut self, light: NodeId, mode: Mode, guidance: GuidanceState) {
        if let Some(view) = self.lights.get_mut(&light) {
            view.mode = mode;
            view.guidance = guidance;
        }
    }

    pub fn snapshot(&self) -> AggregateView {
        AggregateView {
            lights: self
                .lights
                .iter()
                .map(|(id, v)| LightSummary {
                    id: *id,
                    position: [v.position.0, v.position.1],
                    mode: v.mode,
                    guidance: v.guidance,
                    latest: v.latest.map(|f| ReadingView {
                        time: f.time,
                        readings: SensorKind::ALL
                            .iter()
                            .map(|k| (k.name().to_string(), f.reading(*k)))
                            .collect(),
                    }),
                })
                .collect(),
            alarms: self
                .alarms
                .iter()
                .map(|a| AlarmView {
                    id: a.id,
                    region: a.region.iter().copied().collect(),
                    issued: a.issued,
                    cause: a.cause,
                })
                .collect(),
            alert_count: self.alert_log.len(),
            recent_alerts: self
                .alert_log
                .iter()
                .rev()
                .take(RECENT_ALERTS)
                .rev()
                .map(|a| AlertView {
                    source: a.source,
                    time: a.time,
                    cause: a.cause,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingView {
    pub time: SimTime,
    pub readings: BTreeMap<String, f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightSummary {
    pub id: NodeId,
    pub position: [f64; 2],
    pub mode: Mode,
    pub guidance: GuidanceState,
    pub latest: Option<ReadingView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmView {
    pub id: u64,
    pub region: Vec<NodeId>,
    pub issued: SimTime,
    pub cause: AlertCause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertView {
    pub source: NodeId,
    pub time: SimTime,
    pub cause: AlertCause,
}

/// Console-facing view of the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateView {
    pub lights: Vec<LightSummary>,
    pub alarms: Vec<AlarmView>,
    pub alert_count: usize,
    pub recent_alerts: Vec<AlertView>,
}

/// The center node: aggregate, operator key and its own store replica.
#[derive(Debug, Clone)]
pub struct CommandCenter {
    pub id: NodeId,
    pub aggregate: CityAggregate,
    pub replica: Replica,
    pub key: AuthorKey,
}

impl CommandCenter {
    pub fn new(id: NodeId, replica: Replica, key: AuthorKey) -> Self {
        Self {
            id,
            aggregate: CityAggregate::new(id),
            replica,
            key,
        }
    }

    /// Records the alarm, returns the per-light morph commands and posts an
    /// operator bulletin into the store for dissemination.
    pub fn issue_alarm(
        &mut self,
        region: &BTreeSet<NodeId>,
        cause: AlertCause,
        now: SimTime,
    ) -> Result<(Vec<Dispatch>, Message), CommandError> {
        let dispatch = self.aggregate.issue_alarm(region, cause, now)?;
        let names: Vec<String> = region.iter().map(NodeId::to_string).collect();
        let body = format!("ALARM {} {}", cause.name(), names.join(","));
        let bulletin = self
            .replica
            .post(self.key.key_id, now, body.into_bytes(), true)?;
        Ok((dispatch, bulletin))
    }

    pub fn revoke_alarm(
        &mut self,
        region: &BTreeSet<NodeId>,
    ) -> Result<Vec<Dispatch>, CommandError> {
        self.aggregate.revoke_alarm(region)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crdt::{known_keys, ForwardDecision, ReviewPolicy};

    fn city(lights: u32) -> CityAggregate {
        let mut agg = CityAggregate::new(NodeId::center(0));
        for i in 0..lights {
            agg.register_light(NodeId::light(i), (f64::from(i) * 50.0, 0.0));
        }
        agg
    }

    fn frame(light: u32, t: u64) -> SensorFrame {
        SensorFrame {
            light: NodeId::light(light),
            time: SimTime(t),
            readings: [t as f32; 6],
        }
    }

    fn region(ids: &[u32]) -> BTreeSet<NodeId> {
        ids.iter().copied().map(NodeId::light).collect()
    }

    #[test]
    fn frames_update_and_stale_frames_are_dropped() {
        let mut agg = city(2);
        assert_eq!(
            agg.ingest(Ingest::Frame(frame(0, 30_000))),
            Ok(IngestOutcome::Updated)
        );
        let before = agg.clone();
        assert_eq!(
            agg.ingest(Ingest::Frame(frame(0, 10_000))),
            Ok(IngestOutcome::Stale)
        );
        assert_eq!(agg, before);
        assert_eq!(
            agg.ingest(Ingest::Frame(frame(9, 0))),
            Err(CommandError::UnknownSource(NodeId::light(9)))
        );
    }

    #[test]
    fn alerts_are_logged_and_adopted_as_alarms() {
        let mut agg = city(8);
        let alert = CrisisAlert {
            source: NodeId::light(7),
            time: SimTime(60_000),
            cause: AlertCause::FireRule,
        };
        assert_eq!(agg.ingest(Ingest::Alert(alert)), Ok(IngestOutcome::Logged));
        assert_eq!(agg.alert_log().len(), 1);
        assert_eq!(agg.light(&NodeId::light(7)).unwrap().mode, Mode::Emergency);
        assert_eq!(agg.alarms().len(), 1);
        // revocable like an operator alarm
        agg.revoke_alarm(&region(&[7])).unwrap();
        assert!(agg.alarms().is_empty());
        assert_eq!(agg.alert_log().len(), 1, "the log is append-only");
    }

    #[test]
    fn alarm_fan_out_and_revoke_round_trip() {
        let mut agg = city(3);
        let cmds = agg
            .issue_alarm(&region(&[0, 1, 2]), AlertCause::OperatorAlarm, SimTime(5))
            .unwrap();
        assert_eq!(cmds.len(), 3);
        assert!(cmds
            .iter()
            .all(|d| matches!(d.command, LightCommand::Emergency { .. })));
        let cmds = agg.revoke_alarm(&region(&[0, 1, 2])).unwrap();
        assert!(cmds.iter().all(|d| d.command == LightCommand::AllClear));
        assert!(agg.alarms().is_empty());
        assert_eq!(
            agg.revoke_alarm(&region(&[0])),
            Err(CommandError::NoMatchingAlarm)
        );
    }

    #[test]
    fn partial_revoke_shrinks_alarm() {
        let mut agg = city(3);
        agg.issue_alarm(&region(&[0, 1, 2]), AlertCause::OperatorAlarm, SimTime(5))
            .unwrap();
        agg.revoke_alarm(&region(&[1])).unwrap();
        assert_eq!(agg.alarms()[0].region, region(&[0, 2]));
    }

    #[test]
    fn region_validation() {
        let mut agg = city(2);
        assert_eq!(
            agg.issue_alarm(&BTreeSet::new(), AlertCause::OperatorAlarm, SimTime::ZERO),
            Err(CommandError::EmptyRegion)
        );
        let bad = BTreeSet::from([NodeId::device(0)]);
        assert_eq!(
            agg.issue_alarm(&bad, AlertCause::OperatorAlarm, SimTime::ZERO),
            Err(CommandError::NotALight(NodeId::device(0)))
        );
    }

    #[test]
    fn guidance_is_checked_against_known_mode() {
        let mut agg = city(1);
        assert!(agg
            .set_guidance(NodeId::light(0), GuidanceState::Blocked)
            .is_err());
        assert!(agg
            .set_guidance(NodeId::light(0), GuidanceState::Charging)
            .is_ok());
        agg.record_light_state(NodeId::light(0), Mode::Emergency, GuidanceState::Off);
        assert!(agg
            .set_guidance(NodeId::light(0), GuidanceState::Blocked)
            .is_ok());
    }

    #[test]
    fn snapshots() {
        let empty = CityAggregate::new(NodeId::center(0)).snapshot();
        assert!(
            empty.lights.is_empty() && empty.alarms.is_empty() && empty.recent_alerts.is_empty()
        );
        let mut agg = city(2);
        agg.ingest(Ingest::Frame(frame(1, 30_000))).unwrap();
        let view = agg.snapshot();
        let with_readings: Vec<_> = view.lights.iter().filter(|l| l.latest.is_some()).collect();
        assert_eq!(with_readings.len(), 1);
        assert_eq!(with_readings[0].id, NodeId::light(1));
        let a = serde_json::to_string(&agg.snapshot()).unwrap();
        let b = serde_json::to_string(&agg.snapshot()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn alarm_bulletin_is_trusted() {
        let key = AuthorKey::named("operator", true);
        let known = known_keys([key]);
        let replica = Replica::new(NodeId::center(0), known.clone(), ReviewPolicy::Manual);
        let mut cc = CommandCenter::new(NodeId::center(0), replica, key);
        cc.aggregate.register_light(NodeId::light(0), (0.0, 0.0));
        let (cmds, bulletin) = cc
            .issue_alarm(&region(&[0]), AlertCause::OperatorAlarm, SimTime(1))
            .unwrap();
        assert_eq!(cmds.len(), 1);
        assert!(cc.replica.state().contains(&bulletin.id));
        assert_eq!(
            crate::crdt::forward_decision(&bulletin, &known),
            ForwardDecision::AutoForward
        );
    }
}
