//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use citymesh::crdt::{
    forward_decision, known_keys, AuthorKey, CrdtState, KeyId, Message, MsgId, Replica,
    ReviewPolicy, ReviewStatus,
};
use citymesh::engine::{run, trace_jsonl, Engine, TraceRecord};
use citymesh::metrics::ReportFormat;
use citymesh::model::{Mode, NodeId, SensorKind, SimTime};
use citymesh::net::{
    capacity_budget, link_throughput, sensor_bitrate, transmit_time, BandwidthMode, LinkProfile,
};
use citymesh::scenario::Action;
use citymesh::sensing::{
    sensor_topic, DEFAULT_PARTICULATE_THRESHOLD, DEFAULT_RULE_WINDOW_MS,
    DEFAULT_TEMP_RISE_THRESHOLD,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("throughput anchors", throughput_anchors),
        ("bandwidth independence", bandwidth_independence),
        ("capacity budget", capacity),
        ("morphing cadence", morphing_cadence),
        ("crdt lattice laws", lattice_laws),
        ("convergence under partition", convergence_under_partition),
        ("forwarding policy", forwarding_policy),
        ("pipeline latency", pipeline_latency),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
        let took = started.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{took:.2?}]");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "non-string panic".into())
}

fn ensure(ok: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

fn within(started: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < budget, || {
        format!("{what} took {took:.2?}, budget {budget:.0?}")
    })
}

fn throughput_anchors() -> Outcome {
    for mode in BandwidthMode::ALL {
        for (d, want) in [(1.0, 96.0), (10.0, 92.0), (50.0, 88.0)] {
            let p = LinkProfile::new(mode, d, true).map_err(|e| e.to_string())?;
            let got = link_throughput(&p).map_err(|e| e.to_string())?;
            ensure(got == want, || {
                format!("{mode:?} at {d} m: {got} kbit/s, want {want}")
            })?;
        }
    }
    let p = LinkProfile::new(BandwidthMode::ALL[0], 1.0, true).map_err(|e| e.to_string())?;
    let t = transmit_time(8_000_000, &p).map_err(|e| e.to_string())?;
    let rel = (t - 85.0).abs() / 85.0;
    ensure(rel <= 0.05, || {
        format!(
            "8 Mbit at 1 m takes {t:.2} s, {:.1}% from 85 s",
            rel * 100.0
        )
    })?;
    Ok(format!(
        "96/92/88 kbit/s in all modes, 8 Mbit at 1 m = {t:.2} s ({:.1}% from 85 s)",
        rel * 100.0
    ))
}

fn bandwidth_independence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB17);
    for i in 0..1000 {
        let d: f64 = rng.random_range(0.01..=100.0);
        let bits: u64 = rng.random_range(1..=10_000_000);
        let times: Vec<f64> = BandwidthMode::ALL
            .iter()
            .map(|&m| {
                let p = LinkProfile::new(m, d, m.is_covert()).expect("valid profile");
                transmit_time(bits, &p).expect("in range")
            })
            .collect();
        ensure(
            times.iter().all(|t| t.to_bits() == times[0].to_bits()),
            || format!("pair {i} ({d} m, {bits} bits): {times:?}"),
        )?;
    }
    Ok("1000 random pairs, identical across 8/16/20 MHz".into())
}

fn capacity() -> Outcome {
    let rate = sensor_bitrate(6, 32, 5.0).map_err(|e| e.to_string())?;
    ensure(rate == 0.0384, || format!("sensor_bitrate = {rate}"))?;
    // 88 kbit/s over 0.0384 kbit/s is 88000 / 38.4 = 880000 / 384 lights
    let oracle = 880_000u64 / 384;
    let n = capacity_budget(88.0, rate).map_err(|e| e.to_string())?;
    ensure(n == oracle && n == 2291, || {
        format!("capacity_budget = {n}, oracle {oracle}")
    })?;
    ensure(n >= 2000, || format!("{n} lights is under 2000"))?;
    Ok(format!(
        "0.0384 kbit/s per light, {n} lights per 88 kbit/s link"
    ))
}

/// Piecewise-linear noise-free trace of one sensor, rebuilt from the
/// scenario's ramp events.
struct Curve(Vec<(f64, f64)>);

impl Curve {
    fn new(base: f64, ramps: &[(u64, u64, f64)]) -> Self {
        let mut c = Curve(vec![(0.0, base)]);
        for &(start, dur, target) in ramps {
            let s = start as f64;
            let v0 = c.at(s);
            c.0.retain(|(t, _)| *t < s);
            c.0.push((s, v0));
            c.0.push((s + dur as f64, target));
        }
        c
    }

    fn at(&self, t: f64) -> f64 {
        let pts = &self.0;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t <= t1 {
                return if t1 == t0 {
                    v1
                } else {
                    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
                };
            }
        }
        pts.last().unwrap().1
    }

    /// max - min over [from, to]; extremes sit at ends or breakpoints.
    fn spread(&self, from: f64, to: f64) -> f64 {
        let mut vals = vec![self.at(from), self.at(to)];
        vals.extend(
            self.0
                .iter()
                .filter(|(t, _)| *t > from && *t < to)
                .map(|(_, v)| *v),
        );
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

fn morphing_cadence() -> Outcome {
    let s = common::bundled("fire-drill");
    let light = NodeId::light(3);
    let decl = s
        .lights
        .iter()
        .find(|l| l.id == light)
        .ok_or("light:3 missing")?;
    ensure(decl.rules.is_empty(), || "light:3 has custom rules".into())?;
    let ramps = |kind: SensorKind| -> Vec<(u64, u64, f64)> {
        s.events
            .iter()
            .filter_map(|e| match &e.action {
                Action::EnvRamp {
                    light: l,
                    sensor,
                    target,
                    duration_ms,
                } if *l == light && *sensor == kind => {
                    Some((e.time.millis(), *duration_ms, *target))
                }
                _ => None,
            })
            .collect()
    };
    let base = s.traces.get(&light).ok_or("light:3 has no trace")?.base;
    let co2 = Curve::new(base[SensorKind::Co2.index()], &ramps(SensorKind::Co2));
    let temp = Curve::new(
        base[SensorKind::Temperature.index()],
        &ramps(SensorKind::Temperature),
    );
    let window = DEFAULT_RULE_WINDOW_MS as f64;
    let t_sat = (0..s.duration.millis())
        .find(|&t| {
            let t = t as f64;
            co2.at(t) > DEFAULT_PARTICULATE_THRESHOLD
                && temp.spread((t - window).max(0.0), t) > DEFAULT_TEMP_RISE_THRESHOLD
        })
        .ok_or("the fire rule never becomes satisfiable")?;

    let started = Instant::now();
    let out = run(&s).map_err(|e| e.to_string())?;
    within(started, Duration::from_secs(1), "fire-drill run")?;

    let interval = |m: Mode| s.sampling.interval_ms(m);
    let changes: Vec<(u64, Mode)> = out
        .trace
        .iter()
        .filter_map(|r| match r {
            TraceRecord::ModeChanged { time, node, to, .. } if *node == light => {
                Some((time.millis(), *to))
            }
            _ => None,
        })
        .collect();
    let (morph, _) = *changes
        .iter()
        .find(|(_, m)| *m == Mode::Emergency)
        .ok_or("light:3 never entered emergency mode")?;
    ensure(
        morph >= t_sat && morph - t_sat <= interval(Mode::Everyday),
        || format!("morph at {morph} ms, rule satisfiable at {t_sat} ms"),
    )?;

    let topic = sensor_topic(light, SensorKind::Temperature);
    let frames: Vec<u64> = out
        .trace
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Sensor { time, topic: t, .. } if *t == topic => Some(time.millis()),
            _ => None,
        })
        .collect();
    let end = 600_000.min(s.duration.millis());
    let mut bounds = vec![(0u64, Mode::Everyday)];
    bounds.extend(changes.iter().filter(|(t, _)| *t < end).copied());
    let mut segments = Vec::new();
    for (i, &(from, mode)) in bounds.iter().enumerate() {
        let to = bounds.get(i + 1).map_or(end, |b| b.0);
        let got = frames.iter().filter(|t| **t >= from && **t < to).count() as i64;
        let want = ((to - from) as f64 / interval(mode) as f64).round() as i64;
        ensure((got - want).abs() <= 1, || {
            format!("{mode:?} segment {from}..{to} ms: {got} frames, expected {want}")
        })?;
        segments.push(format!("{mode:?} {from}..{to}: {got}/{want}"));
    }
    Ok(format!(
        "rule satisfiable at {t_sat} ms, morph at {morph} ms (+{} ms); frames {}",
        morph - t_sat,
        segments.join(", ")
    ))
}

fn runner(cases: u32, seed: u8) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(
        config,
        TestRng::from_seed(RngAlgorithm::ChaCha, &[seed; 32]),
    )
}

fn lattice_laws() -> Outcome {
    const CASES: u32 = 10_000;
    let mut done = Vec::new();
    let mut check =
        |name: &str, result: Result<(), String>| result.map(|()| done.push(name.to_string()));
    check(
        "commutativity",
        runner(CASES, 1)
            .run(&(common::state(), common::state()), |(a, b)| {
                prop_assert_eq!(a.merge(&b), b.merge(&a));
                Ok(())
            })
            .map_err(|e| format!("commutativity: {e}")),
    )?;
    check(
        "associativity",
        runner(CASES, 2)
            .run(
                &(common::state(), common::state(), common::state()),
                |(a, b, c)| {
                    prop_assert_eq!(a.merge(&b).merge(&c), a.merge(&b.merge(&c)));
                    Ok(())
                },
            )
            .map_err(|e| format!("associativity: {e}")),
    )?;
    check(
        "idempotence",
        runner(CASES, 3)
            .run(&common::state(), |a| {
                prop_assert_eq!(a.merge(&a), a);
                Ok(())
            })
            .map_err(|e| format!("idempotence: {e}")),
    )?;
    check(
        "delta soundness",
        runner(CASES, 4)
            .run(
                &(common::clean_state(), common::consistent_state()),
                |(local, remote)| {
                    let d = local.delta(remote.version());
                    prop_assert_eq!(remote.merge(&d), remote.merge(&local));
                    Ok(())
                },
            )
            .map_err(|e| format!("delta soundness: {e}")),
    )?;
    Ok(format!(
        "{CASES} cases each for {}, zero failures",
        done.join(", ")
    ))
}

fn convergence_under_partition() -> Outcome {
    let s = common::bundled("partition-heal");
    ensure(s.lights.len() == 2 && s.devices.len() == 6, || {
        format!("{} lights, {} devices", s.lights.len(), s.devices.len())
    })?;
    ensure(
        matches!(
            s.events.first().map(|e| &e.action),
            Some(Action::ServerDown)
        ),
        || "scenario does not start with the server down".into(),
    )?;
    let heal = s
        .events
        .iter()
        .find(|e| matches!(e.action, Action::Heal { .. }))
        .map(|e| e.time)
        .ok_or("no heal event")?;
    let started = Instant::now();

    // independent check: stop two sync intervals after healing and compare
    // every replica with the join of all of them
    let mut engine = Engine::new(s.clone()).map_err(|e| e.to_string())?;
    engine.run_until(heal.plus_millis(2 * s.sync_interval_ms));
    let full = common::join_all(engine.replicas().iter().map(|r| r.state()));
    for r in engine.replicas() {
        ensure(r.state() == &full, || {
            format!(
                "{} holds {} of {} messages at heal + {} ms",
                r.owner(),
                r.state().len(),
                full.len(),
                2 * s.sync_interval_ms
            )
        })?;
    }

    let out = run(&s).map_err(|e| e.to_string())?;
    within(started, Duration::from_secs(5), "partition-heal runs")?;
    let r = &out.report;
    let conv = r.convergence_ms.ok_or("report has no convergence time")?;
    ensure(conv <= 2000, || {
        format!("converged {conv} ms after healing")
    })?;
    ensure(r.unaccounted == 0, || {
        format!("{} unaccounted messages", r.unaccounted)
    })?;
    let n = engine.replicas().len();
    ensure(
        r.latencies.len() + r.undelivered.len() == r.posted * (n - 1),
        || {
            format!(
                "{} deliveries + {} undelivered != {} posts x {} peers",
                r.latencies.len(),
                r.undelivered.len(),
                r.posted,
                n - 1
            )
        },
    )?;
    Ok(format!(
        "converged {conv} ms after heal, {} replicas equal to the full join ({} messages), 0 unaccounted",
        n,
        full.len()
    ))
}

struct Net {
    n: usize,
    edges: Vec<(usize, usize)>,
    replicas: Vec<Replica>,
    /// (message id, origin, trusted and well signed)
    posts: Vec<(MsgId, usize, bool)>,
}

fn random_net(rng: &mut ChaCha8Rng) -> Net {
    let n = rng.random_range(2..=10);
    let mut edges = BTreeSet::new();
    for _ in 0..rng.random_range(0..=2 * n) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    // one key per post: a held message blocks later sequence numbers of
    // its author, so sharing keys would mix the two properties
    let posts_n = rng.random_range(1..=4);
    let keys: Vec<AuthorKey> = (0..posts_n)
        .map(|i| AuthorKey::named(&format!("key{i}"), rng.random_bool(0.5)))
        .collect();
    let known = known_keys(keys.iter().copied());
    let mut replicas: Vec<Replica> = (0..n)
        .map(|i| {
            Replica::new(
                NodeId::device(i as u32),
                known.clone(),
                ReviewPolicy::Manual,
            )
        })
        .collect();
    let mut posts = Vec::new();
    for key in &keys {
        let origin = rng.random_range(0..n);
        let valid = rng.random_bool(0.8);
        let m = replicas[origin]
            .post(key.key_id, SimTime(1), b"msg".to_vec(), valid)
            .expect("fresh sequence");
        posts.push((m.id, origin, key.trusted && valid));
    }
    Net {
        n,
        edges: edges.into_iter().collect(),
        replicas,
        posts,
    }
}

fn neighbours(edges: &[(usize, usize)], u: usize) -> impl Iterator<Item = usize> + '_ {
    edges.iter().filter_map(move |&(a, b)| {
        if a == u {
            Some(b)
        } else if b == u {
            Some(a)
        } else {
            None
        }
    })
}

fn forwarding_policy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF0);
    let (mut reviewed, mut approvals_made) = (0, 0);
    for topo in 0..1000 {
        let mut net = random_net(&mut rng);
        let approve = topo % 2 == 1;
        for _ in 0..net.n + 1 {
            common::gossip_round(&mut net.replicas, &net.edges);
            if approve {
                for r in net.replicas.iter_mut() {
                    let held: Vec<MsgId> = r.held().collect();
                    for id in held {
                        if rng.random_bool(0.4) {
                            r.approve(&id, true).expect("held");
                            approvals_made += 1;
                        }
                    }
                }
            }
        }
        for &(id, origin, trusted) in &net.posts {
            let dist = common::hops(net.n, &net.edges, origin);
            let holds = |i: usize| net.replicas[i].state().contains(&id);
            if trusted {
                for (i, d) in dist.iter().enumerate() {
                    ensure(d.is_none() || holds(i), || {
                        format!("topology {topo}: trusted {id:?} missing at reachable replica {i}")
                    })?;
                }
                continue;
            }
            reviewed += 1;
            for i in (0..net.n).filter(|&i| holds(i)) {
                let far = dist[i].is_none_or(|d| d > 1);
                if !approve {
                    ensure(!far, || {
                        format!(
                            "topology {topo}: unapproved {id:?} reached replica {i} at {:?} hops",
                            dist[i]
                        )
                    })?;
                } else if far {
                    let vouched = neighbours(&net.edges, i).any(|j| {
                        holds(j)
                            && (j == origin
                                || net.replicas[j].status(&id) == Some(ReviewStatus::Approved))
                    });
                    ensure(vouched, || {
                        format!(
                            "topology {topo}: {id:?} at replica {i} with no approving neighbour"
                        )
                    })?;
                }
            }
        }
    }
    Ok(format!(
        "1000 topologies, {reviewed} untrusted or forged messages checked, {approvals_made} approvals, zero violations"
    ))
}

fn message(author: KeyId, seq: u64) -> Message {
    Message {
        id: MsgId { author, seq },
        time: SimTime(seq),
        body: format!("report {seq}").into_bytes(),
        signature_valid: true,
    }
}

fn pipeline_latency() -> Outcome {
    let started = Instant::now();
    let author = KeyId::derive("resident");
    let known = known_keys([AuthorKey::named("resident", true)]);
    let me = NodeId::device(0);
    let mut worst = Vec::new();
    for n in [10u64, 100, 1000, 10_000] {
        let mut source = CrdtState::new();
        for seq in 1..=n {
            source
                .add_message(message(author, seq))
                .map_err(|e| e.to_string())?;
        }
        let mut replica = Replica::new(me, known.clone(), ReviewPolicy::Manual);
        replica.receive(&source);
        let peer: BTreeMap<KeyId, u64> = replica.state().version().clone();
        source
            .add_message(message(author, n + 1))
            .map_err(|e| e.to_string())?;
        let fresh = source.delta(replica.state().version());

        let t0 = Instant::now();
        let got = replica.receive(&fresh);
        let m = replica.state().message(&got[0].id).expect("stored");
        let _ = forward_decision(m, replica.known());
        let offer = replica.offer(&peer);
        let took = t0.elapsed();
        ensure(offer.len() == 1, || {
            format!("offer at {n} carries {} messages", offer.len())
        })?;
        ensure(took < Duration::from_millis(100), || {
            format!("receive-decide-offer at {n} messages took {took:.2?}")
        })?;
        worst.push(format!("{n}: {took:.2?}"));
    }

    let mut s = CrdtState::new();
    let mut last = s.encoded_size();
    for seq in 1..=10_000 {
        s.add_message(message(author, seq))
            .map_err(|e| e.to_string())?;
        let size = s.encoded_size();
        ensure(size > last, || {
            format!("encoded_size did not grow at message {seq}")
        })?;
        last = size;
    }
    s.purge(SimTime(5_000)).map_err(|e| e.to_string())?;
    ensure(s.encoded_size() < last, || {
        "purge did not shrink the state".into()
    })?;

    let g = run(&common::bundled("growth")).map_err(|e| e.to_string())?;
    let purge_at = 105_000;
    let series: Vec<&citymesh::metrics::SizeSample> = g
        .report
        .sizes
        .iter()
        .filter(|x| x.node == NodeId::device(1))
        .collect();
    let before: Vec<_> = series
        .iter()
        .filter(|x| x.time.millis() < purge_at)
        .collect();
    let after: Vec<_> = series
        .iter()
        .filter(|x| x.time.millis() >= purge_at)
        .collect();
    ensure(before.windows(2).all(|w| w[0].bytes < w[1].bytes), || {
        "growth sizes not monotone".into()
    })?;
    ensure(
        after
            .first()
            .zip(before.last())
            .is_some_and(|(a, b)| a.bytes < b.bytes),
        || "growth sizes did not drop after the purge".into(),
    )?;
    within(started, Duration::from_secs(30), "pipeline checks")?;
    Ok(format!(
        "receive+decide+offer {}; size grows to {last} B over 10000 messages and drops to {} B after purge",
        worst.join(", "),
        s.encoded_size()
    ))
}

fn determinism() -> Outcome {
    let mut shown = Vec::new();
    for name in common::BUNDLED {
        let s = common::bundled(name);
        let a = run(&s).map_err(|e| e.to_string())?;
        let b = run(&s).map_err(|e| e.to_string())?;
        for format in [ReportFormat::Rows, ReportFormat::Table] {
            ensure(a.report.render(format) == b.report.render(format), || {
                format!("{name}: {format:?} reports differ")
            })?;
        }
        let (ta, tb) = (trace_jsonl(&a.trace), trace_jsonl(&b.trace));
        ensure(ta == tb, || format!("{name}: traces differ"))?;
        shown.push(format!("{name} ({} records)", a.trace.len()));
    }
    Ok(format!(
        "byte-identical reports and traces for {}",
        shown.join(", ")
    ))
}
