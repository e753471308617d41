//! Street-light sensing: synthetic environment traces, the sampling
//! scheduler, in-situ crisis detection and the everyday/emergency morph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GuidanceState, Mode, NodeId, SensorFrame, SensorKind, SimTime};

pub const EVERYDAY_INTERVAL_MS: u64 = 30_000;
pub const EMERGENCY_INTERVAL_MS: u64 = 5_000;

pub const DEFAULT_PARTICULATE_THRESHOLD: f64 = 1000.0;
pub const DEFAULT_TEMP_RISE_THRESHOLD: f64 = 10.0;
pub const DEFAULT_RULE_WINDOW_MS: u64 = 60_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensingError {
    #[error("invalid sampling policy: {0}")]
    Policy(String),
    #[error("invalid detection rule: {0}")]
    Rule(String),
    #[error("{light} sampled at {requested} but next sample is due at {due}")]
    NotDue {
        light: NodeId,
        requested: SimTime,
        due: SimTime,
    },
    #[error("guidance `{state}` is not permitted in {mode} mode")]
    Guidance { state: GuidanceState, mode: Mode },
    #[error("frame history is not sorted by time")]
    UnsortedHistory,
    #[error("frame history contains a frame from {found}, expected {expected}")]
    ForeignFrame { expected: NodeId, found: NodeId },
}

/// Sampling cadence per mode, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    everyday_ms: u64,
    emergency_ms: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            everyday_ms: EVERYDAY_INTERVAL_MS,
            emergency_ms: EMERGENCY_INTERVAL_MS,
        }
    }
}

impl SamplingPolicy {
    pub fn new(everyday_ms: u64, emergency_ms: u64) -> Result<Self, SensingError> {
        if emergency_ms == 0 {
            return Err(SensingError::Policy("intervals must be positive".into()));
        }
        if emergency_ms >= everyday_ms {
            return Err(SensingError::Policy(format!(
                "emergency interval {emergency_ms} ms must be shorter than everyday interval {everyday_ms} ms"
            )));
        }
        Ok(Self {
            everyday_ms,
            emergency_ms,
        })
    }

    pub fn everyday_ms(&self) -> u64 {
        self.everyday_ms
    }

    pub fn emergency_ms(&self) -> u64 {
        self.emergency_ms
    }

    pub fn interval_ms(&self, mode: Mode) -> u64 {
        match mode {
            Mode::Everyday => self.everyday_ms,
            Mode::Emergency => self.emergency_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlertCause {
    FireRule,
    VisionEvent,
    OperatorAlarm,
}

impl AlertCause {
    pub fn name(self) -> &'static str {
        match self {
            AlertCause::FireRule => "fire-rule",
            AlertCause::VisionEvent => "vision-event",
            AlertCause::OperatorAlarm => "operator-alarm",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "fire-rule" | "fire" => Some(AlertCause::FireRule),
            "vision-event" | "vision" => Some(AlertCause::VisionEvent),
            "operator-alarm" | "operator" => Some(AlertCause::OperatorAlarm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    FireRule,
    VisionEvent,
}

/// A local detection rule. Only fire rules use the thresholds; vision rules
/// fire on scripted markers in the environment trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRule {
    pub kind: RuleKind,
    pub particulate_threshold: f64,
    pub temp_rise_threshold: f64,
    pub window_ms: u64,
}

impl DetectionRule {
    pub fn fire(
        particulate_threshold: f64,
        temp_rise_threshold: f64,
        window_ms: u64,
    ) -> Result<Self, SensingError> {
        if !(particulate_threshold > 0.0 && temp_rise_threshold > 0.0) {
            return Err(SensingError::Rule(
                "thresholds must be strictly positive".into(),
            ));
        }
        Ok(Self {
            kind: RuleKind::FireRule,
            particulate_threshold,
            temp_rise_threshold,
            window_ms,
        })
    }

    pub fn default_fire() -> Self {
        Self {
            kind: RuleKind::FireRule,
            particulate_threshold: DEFAULT_PARTICULATE_THRESHOLD,
            temp_rise_threshold: DEFAULT_TEMP_RISE_THRESHOLD,
            window_ms: DEFAULT_RULE_WINDOW_MS,
        }
    }

    pub fn vision() -> Self {
        Self {
            kind: RuleKind::VisionEvent,
            ..Self::default_fire()
        }
    }

    pub fn default_set() -> Vec<Self> {
        vec![Self::default_fire(), Self::vision()]
    }

    /// Truth table of the fire rule over the frames inside the window
    /// ending at the newest frame.
    fn fire_holds(&self, history: &[SensorFrame]) -> bool {
        let Some(latest) = history.last() else {
            return false;
        };
        let from = latest.time.millis().saturating_sub(self.window_ms);
        let mut min_t = f64::INFINITY;
        let mut max_t = f64::NEG_INFINITY;
        for f in history.iter().rev().take_while(|f| f.time.millis() >= from) {
            let t = f64::from(f.reading(SensorKind::Temperature));
            min_t = min_t.min(t);
            max_t = max_t.max(t);
        }
        let co2 = f64::from(latest.reading(SensorKind::Co2));
        co2 > self.particulate_threshold && (max_t - min_t) > self.temp_rise_threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrisisAlert {
    pub source: NodeId,
    pub time: SimTime,
    pub cause: AlertCause,
}

/// Linear move of one sensor towards `target`, starting from whatever the
/// trace reads when the ramp begins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub sensor: SensorKind,
    pub start: SimTime,
    pub duration_ms: u64,
    pub target: f64,
}

/// Synthetic ground truth seen by one light's sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    base: [f64; 6],
    ramps: Vec<Ramp>,
    vision: Vec<SimTime>,
    noise_std: f64,
    seed: u64,
}

impl Environment {
    pub fn constant(base: [f64; 6]) -> Self {
        Self {
            base,
            ramps: Vec::new(),
            vision: Vec::new(),
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn with_noise(mut self, std_dev: f64, seed: u64) -> Self {
        self.noise_std = std_dev.max(0.0);
        self.seed = seed;
        self
    }

    pub fn base(&self) -> [f64; 6] {
        self.base
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn add_ramp(&mut self, ramp: Ramp) {
        let at = self.ramps.partition_point(|r| r.start <= ramp.start);
        self.ramps.insert(at, ramp);
    }

    pub fn add_vision_event(&mut self, time: SimTime) {
        let at = self.vision.partition_point(|t| *t <= time);
        self.vision.insert(at, time);
    }

    /// Noise-free value of `kind` at `time`.
    pub fn value_at(&self, kind: SensorKind, time: SimTime) -> f64 {
        let started: Vec<&Ramp> = self
            .ramps
            .iter()
            .filter(|r| r.sensor == kind && r.start <= time)
            .collect();
        self.fold_ramps(kind, &started, time)
    }

    // each ramp starts from the value produced by all earlier ramps at its start
    fn fold_ramps(&self, kind: SensorKind, ramps: &[&Ramp], time: SimTime) -> f64 {
        let Some((last, earlier)) = ramps.split_last() else {
            return self.base[kind.index()];
        };
        let from = self.fold_ramps(kind, earlier, last.start);
        let frac = if last.duration_ms == 0 {
            1.0
        } else {
            (time.saturating_sub(last.start) as f64 / last.duration_ms as f64).min(1.0)
        };
        from + (last.target - from) * frac
    }

    /// Whether a scripted vision marker falls in `(after, upto]`.
    pub fn vision_between(&self, after: Option<SimTime>, upto: SimTime) -> bool {
        self.vision
            .iter()
            .any(|t| *t <= upto && after.is_none_or(|a| *t > a))
    }

    /// Readings at `time` for `light`, including seeded noise. The noise
    /// depends only on (seed, light, time).
    pub fn readings_at(&self, light: NodeId, time: SimTime) -> [f32; 6] {
        let mut out = [0f32; 6];
        let noise = (self.noise_std > 0.0).then(|| {
            let mix = self.seed
                ^ (u64::from(light.index)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                ^ time.millis().wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
            (
                ChaCha8Rng::seed_from_u64(mix),
                Normal::new(0.0, self.noise_std).expect("std_dev is finite and non-negative"),
            )
        });
        let mut noise = noise;
        for kind in SensorKind::ALL {
            let mut v = self.value_at(kind, time);
            if let Some((rng, dist)) = noise.as_mut() {
                v += dist.sample(rng);
            }
            let v = v as f32;
            out[kind.index()] = if v.is_finite() { v } else { 0.0 };
        }
        out
    }
}

/// What drives a morph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger {
    Crisis(CrisisAlert),
    AllClear,
}

/// Side effects of a light state transition.
#[derive(Debug, Clone, PartialEq)]
pub enum LightEvent {
    ModeChanged {
        light: NodeId,
        from: Mode,
        to: Mode,
    },
    GuidanceChanged {
        light: NodeId,
        from: GuidanceState,
        to: GuidanceState,
    },
    PushNotification {
        light: NodeId,
        device: NodeId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightNode {
    pub id: NodeId,
    mode: Mode,
    policy: SamplingPolicy,
    guidance: GuidanceState,
    rules: Vec<DetectionRule>,
    last_sample: SimTime,
    environment: Environment,
}

impl LightNode {
    pub fn new(
        id: NodeId,
        policy: SamplingPolicy,
        rules: Vec<DetectionRule>,
        environment: Environment,
    ) -> Result<Self, SensingError> {
        if let Some(r) = rules.iter().find(|r| r.window_ms < policy.emergency_ms()) {
            return Err(SensingError::Rule(format!(
                "window {} ms is shorter than the emergency sampling interval",
                r.window_ms
            )));
        }
        Ok(Self {
            id,
            mode: Mode::Everyday,
            policy,
            guidance: GuidanceState::Off,
            rules,
            last_sample: SimTime::ZERO,
            environment,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn guidance(&self) -> GuidanceState {
        self.guidance
    }

    pub fn policy(&self) -> SamplingPolicy {
        self.policy
    }

    pub fn rules(&self) -> &[DetectionRule] {
        &self.rules
    }

    pub fn last_sample(&self) -> SimTime {
        self.last_sample
    }

    pub fn interval_ms(&self) -> u64 {
        self.policy.interval_ms(self.mode)
    }

    pub fn environment(&self) -> &Environment {
        &self.environment
    }

    pub fn environment_mut(&mut self) -> &mut Environment {
        &mut self.environment
    }

    pub fn next_sample_time(&self) -> SimTime {
        self.last_sample.plus_millis(self.interval_ms())
    }

    pub fn sample(&mut self, time: SimTime) -> Result<SensorFrame, SensingError> {
        let due = self.next_sample_time();
        if time < due {
            return Err(SensingError::NotDue {
                light: self.id,
                requested: time,
                due,
            });
        }
        self.last_sample = time;
        Ok(SensorFrame {
            light: self.id,
            time,
            readings: self.environment.readings_at(self.id, time),
        })
    }

    /// Runs every rule against the newest frame of `history`.
    pub fn evaluate_rules(
        &self,
        history: &[SensorFrame],
    ) -> Result<Option<CrisisAlert>, SensingError> {
        if let Some(f) = history.iter().find(|f| f.light != self.id) {
            return Err(SensingError::ForeignFrame {
                expected: self.id,
                found: f.light,
            });
        }
        if history.windows(2).any(|w| w[0].time > w[1].time) {
            return Err(SensingError::UnsortedHistory);
        }
        let Some(latest) = history.last() else {
            return Ok(None);
        };
        let previous = history.len().checked_sub(2).map(|i| history[i].time);
        for rule in &self.rules {
            let cause = match rule.kind {
                RuleKind::FireRule if rule.fire_holds(history) => AlertCause::FireRule,
                RuleKind::VisionEvent if self.environment.vision_between(previous, latest.time) => {
                    AlertCause::VisionEvent
                }
                _ => continue,
            };
            return Ok(Some(CrisisAlert {
                source: self.id,
                time: latest.time,
                cause,
            }));
        }
        Ok(None)
    }

    /// Applies a trigger. Triggers that match the current mode change
    /// nothing and emit nothing. `connected` lists the citizen devices
    /// attached to this light; each gets a push on entering emergency mode.
    pub fn morph(&mut self, trigger: Trigger, connected: &[NodeId]) -> Vec<LightEvent> {
        let target = match trigger {
            Trigger::Crisis(_) => Mode::Emergency,
            Trigger::AllClear => Mode::Everyday,
        };
        if self.mode == target {
            return Vec::new();
        }
        let mut events = vec![LightEvent::ModeChanged {
            light: self.id,
            from: self.mode,
            to: target,
        }];
        self.mode = target;
        let keep = target == Mode::Emergency && self.guidance.permitted_in(target);
        if !keep && self.guidance != GuidanceState::Off {
            events.push(LightEvent::GuidanceChanged {
                light: self.id,
                from: self.guidance,
                to: GuidanceState::Off,
            });
            self.guidance = GuidanceState::Off;
        }
        if target == Mode::Emergency {
            events.extend(connected.iter().map(|d| LightEvent::PushNotification {
                light: self.id,
                device: *d,
            }));
        }
        events
    }

    pub fn set_guidance(&mut self, state: GuidanceState) -> Result<LightEvent, SensingError> {
        if !state.permitted_in(self.mode) {
            return Err(SensingError::Guidance {
                state,
                mode: self.mode,
            });
        }
        let from = self.guidance;
        self.guidance = state;
        Ok(LightEvent::GuidanceChanged {
            light: self.id,
            from,
            to: state,
        })
    }
}

/// Publishing topic for one sensor of one light.
pub fn sensor_topic(light: NodeId, kind: SensorKind) -> String {
    format!("city/light/{}/sensor/{}", light.index, kind.name())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: [f64; 6] = [0.0, 5.0, 120.0, 20.0, 55.0, 400.0];

    fn node(env: Environment) -> LightNode {
        LightNode::new(
            NodeId::light(3),
            SamplingPolicy::default(),
            DetectionRule::default_set(),
            env,
        )
        .unwrap()
    }

    fn frame(t: u64, temp: f32, co2: f32) -> SensorFrame {
        let mut readings = [0.0; 6];
        readings[SensorKind::Temperature.index()] = temp;
        readings[SensorKind::Co2.index()] = co2;
        SensorFrame {
            light: NodeId::light(3),
            time: SimTime(t),
            readings,
        }
    }

    /// The fire trace used by the bundled fire drill: temperature 20 -> 45
    /// and CO2 400 -> 1500, both ramping over [40 s, 60 s].
    fn fire_env() -> Environment {
        let mut env = Environment::constant(BASE);
        env.add_ramp(Ramp {
            sensor: SensorKind::Temperature,
            start: SimTime(40_000),
            duration_ms: 20_000,
            target: 45.0,
        });
        env.add_ramp(Ramp {
            sensor: SensorKind::Co2,
            start: SimTime(40_000),
            duration_ms: 20_000,
            target: 1500.0,
        });
        env
    }

    #[test]
    fn next_sample_time_per_mode() {
        let mut n = node(Environment::constant(BASE));
        assert_eq!(n.next_sample_time(), SimTime(30_000));
        let alert = CrisisAlert {
            source: n.id,
            time: SimTime::ZERO,
            cause: AlertCause::FireRule,
        };
        n.morph(Trigger::Crisis(alert), &[]);
        assert_eq!(n.next_sample_time(), SimTime(5_000));
        n.last_sample = SimTime(12_000);
        assert_eq!(n.next_sample_time(), SimTime(17_000));
    }

    #[test]
    fn constant_trace_without_noise_is_exact() {
        let mut n = node(Environment::constant(BASE));
        let f = n.sample(SimTime(30_000)).unwrap();
        let expected: Vec<f32> = BASE.iter().map(|v| *v as f32).collect();
        assert_eq!(f.readings.to_vec(), expected);
        assert_eq!(n.last_sample(), SimTime(30_000));
    }

    #[test]
    fn sampling_early_is_a_scheduling_error() {
        let mut n = node(Environment::constant(BASE));
        assert!(matches!(
            n.sample(SimTime(29_999)),
            Err(SensingError::NotDue { .. })
        ));
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let env = Environment::constant(BASE).with_noise(0.5, 42);
        let a = env.readings_at(NodeId::light(1), SimTime(5_000));
        let b = env.readings_at(NodeId::light(1), SimTime(5_000));
        assert_eq!(a, b);
        let c = Environment::constant(BASE)
            .with_noise(0.5, 43)
            .readings_at(NodeId::light(1), SimTime(5_000));
        assert_ne!(a, c);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fire_trace_at_sixty_seconds_exceeds_thresholds() {
        // hand evaluation: both ramps complete at 60 s -> temp 45, co2 1500;
        // at 30 s the trace still reads the base values 20 / 400.
        let env = fire_env();
        assert_eq!(env.value_at(SensorKind::Temperature, SimTime(60_000)), 45.0);
        assert_eq!(env.value_at(SensorKind::Co2, SimTime(60_000)), 1500.0);
        assert_eq!(env.value_at(SensorKind::Temperature, SimTime(30_000)), 20.0);
        assert_eq!(env.value_at(SensorKind::Co2, SimTime(50_000)), 950.0);

        let mut n = node(env);
        let f30 = n.sample(SimTime(30_000)).unwrap();
        let f60 = n.sample(SimTime(60_000)).unwrap();
        assert!(f64::from(f60.reading(SensorKind::Co2)) > DEFAULT_PARTICULATE_THRESHOLD);
        let rise = f60.reading(SensorKind::Temperature) - f30.reading(SensorKind::Temperature);
        assert!(f64::from(rise) > DEFAULT_TEMP_RISE_THRESHOLD);
        let alert = n.evaluate_rules(&[f30, f60]).unwrap().unwrap();
        assert_eq!(alert.cause, AlertCause::FireRule);
        assert_eq!(alert.time, SimTime(60_000));
    }

    #[test]
    fn chained_ramps_start_from_current_value() {
        let mut env = Environment::constant(BASE);
        env.add_ramp(Ramp {
            sensor: SensorKind::Temperature,
            start: SimTime(0),
            duration_ms: 10_000,
            target: 30.0,
        });
        env.add_ramp(Ramp {
            sensor: SensorKind::Temperature,
            start: SimTime(5_000),
            duration_ms: 10_000,
            target: 5.0,
        });
        // first ramp reaches 25 at 5 s; second goes 25 -> 5 over [5 s, 15 s]
        assert_eq!(env.value_at(SensorKind::Temperature, SimTime(5_000)), 25.0);
        assert_eq!(env.value_at(SensorKind::Temperature, SimTime(10_000)), 15.0);
        assert_eq!(env.value_at(SensorKind::Temperature, SimTime(20_000)), 5.0);
    }

    #[test]
    fn fire_rule_truth_table() {
        let n = node(Environment::constant(BASE));
        // (co2 above?, temp rise above?) -> alert?
        let cases = [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (true, true, true),
        ];
        for (co2_hi, rise_hi, expect) in cases {
            let co2 = if co2_hi { 1200.0 } else { 800.0 };
            let end_temp = if rise_hi { 32.0 } else { 25.0 };
            let history = [frame(0, 20.0, 400.0), frame(30_000, end_temp, co2)];
            let got = n.evaluate_rules(&history).unwrap();
            assert_eq!(got.is_some(), expect, "co2_hi={co2_hi} rise_hi={rise_hi}");
        }
        // all zero
        assert_eq!(n.evaluate_rules(&[frame(0, 0.0, 0.0)]).unwrap(), None);
        // the rise must happen inside the window
        let history = [frame(0, 20.0, 400.0), frame(61_000, 32.0, 1200.0)];
        assert_eq!(n.evaluate_rules(&history).unwrap(), None);
        // thresholds are strict
        let history = [frame(0, 20.0, 400.0), frame(30_000, 30.0, 1000.0)];
        assert_eq!(n.evaluate_rules(&history).unwrap(), None);
    }

    #[test]
    fn vision_marker_fires_on_next_frame() {
        let mut env = Environment::constant(BASE);
        env.add_vision_event(SimTime(42_000));
        let n = node(env);
        let plain = |t| {
            let mut f = frame(t, 20.0, 400.0);
            f.light = n.id;
            f
        };
        assert_eq!(n.evaluate_rules(&[plain(30_000)]).unwrap(), None);
        let alert = n
            .evaluate_rules(&[plain(30_000), plain(60_000)])
            .unwrap()
            .unwrap();
        assert_eq!(alert.cause, AlertCause::VisionEvent);
        assert_eq!(
            n.evaluate_rules(&[plain(60_000), plain(90_000)]).unwrap(),
            None
        );
    }

    #[test]
    fn bad_history_is_rejected() {
        let n = node(Environment::constant(BASE));
        let unsorted = [frame(30_000, 20.0, 400.0), frame(0, 20.0, 400.0)];
        assert_eq!(
            n.evaluate_rules(&unsorted),
            Err(SensingError::UnsortedHistory)
        );
        let mut foreign = frame(0, 20.0, 400.0);
        foreign.light = NodeId::light(9);
        assert!(matches!(
            n.evaluate_rules(&[foreign]),
            Err(SensingError::ForeignFrame { .. })
        ));
    }

    #[test]
    fn morph_to_emergency_notifies_connected_devices() {
        let mut n = node(Environment::constant(BASE));
        let alert = CrisisAlert {
            source: n.id,
            time: SimTime(60_000),
            cause: AlertCause::FireRule,
        };
        let devices = [NodeId::device(0), NodeId::device(1)];
        let events = n.morph(Trigger::Crisis(alert), &devices);
        assert_eq!(n.mode(), Mode::Emergency);
        assert_eq!(n.interval_ms(), 5_000);
        let pushes: Vec<_> = events
            .iter()
            .filter_map(|e| match e {
                LightEvent::PushNotification { device, .. } => Some(*device),
                _ => None,
            })
            .collect();
        assert_eq!(pushes, devices);

        let before = n.clone();
        assert!(n.morph(Trigger::Crisis(alert), &devices).is_empty());
        assert_eq!(n, before);
    }

    #[test]
    fn all_clear_resets_mode_and_guidance() {
        let mut n = node(Environment::constant(BASE));
        n.set_guidance(GuidanceState::Charging).unwrap();
        let alert = CrisisAlert {
            source: n.id,
            time: SimTime::ZERO,
            cause: AlertCause::OperatorAlarm,
        };
        n.morph(Trigger::Crisis(alert), &[]);
        assert_eq!(
            n.guidance(),
            GuidanceState::Off,
            "charging is not an emergency state"
        );
        n.set_guidance(GuidanceState::SafeDirection).unwrap();
        let events = n.morph(Trigger::AllClear, &[]);
        assert_eq!(n.mode(), Mode::Everyday);
        assert_eq!(n.interval_ms(), 30_000);
        assert_eq!(n.guidance(), GuidanceState::Off);
        assert_eq!(events.len(), 2);
        assert!(n.morph(Trigger::AllClear, &[]).is_empty());
    }

    #[test]
    fn guidance_respects_mode() {
        let mut n = node(Environment::constant(BASE));
        assert_eq!(
            n.set_guidance(GuidanceState::Blocked),
            Err(SensingError::Guidance {
                state: GuidanceState::Blocked,
                mode: Mode::Everyday
            })
        );
        n.set_guidance(GuidanceState::Charging).unwrap();
        assert_eq!(n.guidance(), GuidanceState::Charging);
        let alert = CrisisAlert {
            source: n.id,
            time: SimTime::ZERO,
            cause: AlertCause::VisionEvent,
        };
        n.morph(Trigger::Crisis(alert), &[]);
        n.set_guidance(GuidanceState::SafeDirection).unwrap();
        assert_eq!(n.guidance(), GuidanceState::SafeDirection);
    }

    #[test]
    fn policy_validation() {
        assert!(SamplingPolicy::new(30_000, 5_000).is_ok());
        assert!(SamplingPolicy::new(5_000, 5_000).is_err());
        assert!(SamplingPolicy::new(30_000, 0).is_err());
        assert!(DetectionRule::fire(0.0, 10.0, 60_000).is_err());
        let short = DetectionRule::fire(1000.0, 10.0, 1_000).unwrap();
        assert!(LightNode::new(
            NodeId::light(0),
            SamplingPolicy::default(),
            vec![short],
            Environment::constant(BASE)
        )
        .is_err());
    }

    #[test]
    fn topics() {
        assert_eq!(
            sensor_topic(NodeId::light(7), SensorKind::Co2),
            "city/light/7/sensor/co2"
        );
    }
}
