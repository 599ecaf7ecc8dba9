#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use sportprov::game::{GameIngest, Roster};
use sportprov::graph::{ConnectionClass, NodeKind, ProvGraph, TopLevel};
use sportprov::query::{influence_depths, QueryFilter};
use sportprov::sprov::{parse, serialize};
use sportprov::testkit::{random_graph, random_stream, rng};

pub const PLAYERS: [&str; 5] = ["P3", "P7", "P9", "P12", "P21"];

/// Activity depth of everything `target` depends on, by relaxing every edge
/// until nothing changes.
pub fn depth_oracle(g: &ProvGraph, target: &str, f: &QueryFilter) -> BTreeMap<String, u32> {
    let cost = |id: &str| u32::from(g.node(id).unwrap().kind.top_level() == TopLevel::Activity);
    let limit = f.max_activity_depth.unwrap_or(u32::MAX);
    let scope = if f.stop_at_reset { g.node(target).unwrap().attr("chain") } else { None };
    let mut dist = BTreeMap::from([(target.to_string(), cost(target))]);
    if cost(target) > limit {
        return dist;
    }
    loop {
        let mut changed = false;
        for e in g.edges() {
            let Some(&du) = dist.get(e.src.as_str()) else { continue };
            if let Some(set) = &f.connection_classes {
                if !e.kind.connection.is_some_and(|c| set.contains(&c)) {
                    continue;
                }
            }
            let v = g.node(e.dst.as_str()).unwrap();
            if scope.is_some_and(|s| v.attr("chain").is_some_and(|c| c != s)) {
                continue;
            }
            let nd = du + cost(v.id.as_str());
            if nd <= limit && dist.get(v.id.as_str()).is_none_or(|&old| nd < old) {
                dist.insert(v.id.to_string(), nd);
                changed = true;
            }
        }
        if !changed {
            return dist;
        }
    }
}

pub fn random_filter<R: Rng>(r: &mut R) -> QueryFilter {
    let pick_some = |r: &mut R, all: &[NodeKind]| all.iter().copied().filter(|_| r.random_bool(0.5)).collect();
    QueryFilter {
        node_kinds: r.random_bool(0.5).then(|| pick_some(r, &NodeKind::SPECIALISATIONS)),
        max_activity_depth: r.random_bool(0.6).then(|| r.random_range(0..5)),
        stop_at_reset: r.random_bool(0.5),
        connection_classes: r.random_bool(0.4).then(|| {
            [ConnectionClass::DataDependency, ConnectionClass::PhysicalCausality].into_iter().filter(|_| r.random_bool(0.5)).collect()
        }),
    }
}

/// One random graph, target and filter checked against the oracle.
pub fn query_case(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let g = random_graph(&mut r, 200);
    let ids: Vec<String> = g.node_ids().map(|i| i.to_string()).collect();
    let target = ids.choose(&mut r).ok_or("empty graph")?;
    let f = random_filter(&mut r);
    let got: BTreeMap<String, u32> =
        influence_depths(&g, target, &f).map_err(|e| e.to_string())?.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let want = depth_oracle(&g, target, &f);
    if got != want {
        return Err(format!("seed {seed}: target {target} filter {f:?}: got {got:?}, want {want:?}"));
    }
    Ok(())
}

pub fn round_trip_case(seed: u64) -> Result<(), String> {
    let g = random_graph(&mut rng(seed), 200);
    let text = serialize(&g).map_err(|e| e.to_string())?;
    if serialize(&g).map_err(|e| e.to_string())? != text {
        return Err(format!("seed {seed}: serialization is not deterministic"));
    }
    let back = parse(&text).map_err(|e| format!("seed {seed}: {e}"))?;
    if back != g {
        return Err(format!("seed {seed}: parsed graph differs"));
    }
    if serialize(&back).map_err(|e| e.to_string())? != text {
        return Err(format!("seed {seed}: second serialization differs"));
    }
    Ok(())
}

/// Ingest a random stream and check that no dependency edge, and no query
/// that ignores scopes, reaches across possession chains. Returns the number
/// of chains.
pub fn reset_case(seed: u64, len: usize) -> Result<usize, String> {
    let events = random_stream(&mut rng(seed), len, &PLAYERS);
    let mut g = ProvGraph::new();
    let mut st = GameIngest::new("g", Roster::open());
    st.ingest_all(&mut g, &events).map_err(|e| e.to_string())?;
    for e in g.edges().filter(|e| e.kind.relation.is_dependency()) {
        let a = g.node(e.src.as_str()).unwrap().attr("chain");
        let b = g.node(e.dst.as_str()).unwrap().attr("chain");
        if a != b {
            return Err(format!("seed {seed}: edge {e} joins chains {a:?} and {b:?}"));
        }
    }
    for n in g.nodes().filter(|n| n.attr("chain").is_some()) {
        let reach = influence_depths(&g, n.id.as_str(), &QueryFilter::default().crossing_resets()).map_err(|e| e.to_string())?;
        for id in reach.keys() {
            let other = g.node(id.as_str()).unwrap().attr("chain");
            if other.is_some() && other != n.attr("chain") {
                return Err(format!("seed {seed}: {} reaches {id} in another chain", n.id));
            }
        }
    }
    Ok(st.chains().len())
}
