#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use citymesh::crdt::{CrdtState, KeyId, Message, MsgId};
use citymesh::model::SimTime;
use citymesh::scenario::Scenario;
use proptest::prelude::*;

pub const AUTHORS: [&str; 3] = ["ana", "ben", "cho"];

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.scn"))
}

pub fn bundled(name: &str) -> Scenario {
    let text = std::fs::read_to_string(scenario_path(name)).expect("bundled scenario exists");
    Scenario::parse(&text).expect("bundled scenario parses")
}

pub const BUNDLED: [&str; 3] = ["fire-drill", "partition-heal", "growth"];

/// The one well-formed message every replica agrees on for an id. A
/// `variant` other than 0 is a forged body under the same id.
pub fn universe(author: usize, seq: u64, variant: u8) -> Message {
    let mut body = format!("{}-{seq}", AUTHORS[author]).into_bytes();
    if variant != 0 {
        body.push(b'!');
        body.push(variant);
    }
    Message {
        id: MsgId {
            author: KeyId::derive(AUTHORS[author]),
            seq,
        },
        time: SimTime(seq * 1000 + author as u64),
        body,
        signature_valid: variant == 0,
    }
}

#[derive(Debug, Clone)]
pub struct StateRecipe {
    counts: [u64; 3],
    forged: Option<(usize, u64, u8)>,
    horizon: Option<u64>,
    delta_against: Option<[u64; 3]>,
}

fn recipe(forge: bool, gaps: bool) -> impl Strategy<Value = StateRecipe> {
    (
        proptest::array::uniform3(0u64..6),
        proptest::option::weighted(0.15, (0usize..3, 1u64..6, 1u8..3)),
        proptest::option::weighted(0.3, 0u64..6500),
        proptest::option::weighted(0.3, proptest::array::uniform3(0u64..5)),
    )
        .prop_map(
            move |(counts, forged, horizon, delta_against)| StateRecipe {
                counts,
                forged: forged.filter(|_| forge),
                horizon,
                delta_against: delta_against.filter(|_| gaps),
            },
        )
}

pub fn build(r: &StateRecipe) -> CrdtState {
    let mut s = CrdtState::new();
    for (a, &n) in r.counts.iter().enumerate() {
        for seq in 1..=n {
            let variant = match r.forged {
                Some((fa, fs, v)) if fa == a && fs == seq => v,
                _ => 0,
            };
            s.add_message(universe(a, seq, variant))
                .expect("contiguous");
        }
    }
    if let Some(h) = r.horizon {
        s.purge(SimTime(h)).expect("fresh horizon");
    }
    if let Some(v) = r.delta_against {
        let version: BTreeMap<KeyId, u64> = AUTHORS
            .iter()
            .zip(v)
            .map(|(name, seq)| (KeyId::derive(name), seq))
            .collect();
        s = s.delta(&version);
    }
    s
}

fn joined(forge: bool, gaps: bool) -> impl Strategy<Value = CrdtState> {
    proptest::collection::vec(recipe(forge, gaps), 1..3).prop_map(|rs| {
        rs.iter()
            .map(build)
            .reduce(|acc, s| acc.merge(&s))
            .expect("at least one")
    })
}

/// Random states reachable through the public API: contiguous logs,
/// purged logs, deltas with gaps, forged duplicates and joins of those.
pub fn state() -> impl Strategy<Value = CrdtState> {
    joined(true, true)
}

/// Like [`state`] but every id maps to one message.
pub fn clean_state() -> impl Strategy<Value = CrdtState> {
    joined(false, true)
}

/// A replica's own state: every sequence up to its version is either
/// present or older than the purge horizon.
pub fn consistent_state() -> impl Strategy<Value = CrdtState> {
    joined(false, false)
}

pub fn join_all<'a>(states: impl IntoIterator<Item = &'a CrdtState>) -> CrdtState {
    states
        .into_iter()
        .fold(CrdtState::new(), |acc, s| acc.merge(s))
}

/// One synchronous anti-entropy round: every replica offers to each
/// neighbour against the neighbour's version at the start of the round.
pub fn gossip_round(replicas: &mut [citymesh::crdt::Replica], edges: &[(usize, usize)]) {
    let offers: Vec<(usize, CrdtState)> = edges
        .iter()
        .flat_map(|&(a, b)| [(a, b), (b, a)])
        .map(|(from, to)| (to, replicas[from].offer(replicas[to].state().version())))
        .collect();
    for (to, state) in offers {
        replicas[to].receive(&state);
    }
}

/// Hop distances from `from` over undirected `edges`.
pub fn hops(n: usize, edges: &[(usize, usize)], from: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; n];
    dist[from] = Some(0);
    let mut frontier = vec![from];
    let mut d = 0;
    while !frontier.is_empty() {
        d += 1;
        let mut next = Vec::new();
        for &u in &frontier {
            for &(a, b) in edges {
                let v = if a == u {
                    b
                } else if b == u {
                    a
                } else {
                    continue;
                };
                if dist[v].is_none() {
                    dist[v] = Some(d);
                    next.push(v);
                }
            }
        }
        frontier = next;
    }
    dist
}
