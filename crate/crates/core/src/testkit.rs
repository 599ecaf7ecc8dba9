//! Seeded generators for random graphs, event streams and pipelines. Enabled by the
//! `testkit` feature; used by property and acceptance tests.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::collections::BTreeMap;

use serde_json::json;

use crate::game::{write_events_jsonl, EventKind, GameEvent};
use crate::privacy::make_map;
use crate::workflow::{Override, PortType, Replacement, StepDef, Value, WorkflowDef};
use crate::graph::{ConnectionClass, EdgeKind, NodeId, NodeKind, ProvEdge, ProvGraph, ProvNode, Relation, TopLevel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const ALL_KINDS: [NodeKind; 16] = [
    NodeKind::Entity,
    NodeKind::Activity,
    NodeKind::Agent,
    NodeKind::VideoFeed,
    NodeKind::PhysicalGameState,
    NodeKind::Metric,
    NodeKind::Dataset,
    NodeKind::Annotation,
    NodeKind::Computation,
    NodeKind::DeIdentify,
    NodeKind::GameAction,
    NodeKind::Human,
    NodeKind::Player,
    NodeKind::PlayerRole,
    NodeKind::Sensor,
    NodeKind::WebPortal,
];

const LABEL_PIECES: [&str; 10] = ["kick", "P7", "say \"hi\"", "back\\slash", "line\nbreak", "tab\there", "Ünïcødé", "", " ", "a,b=[c]"];

fn label<R: Rng>(rng: &mut R) -> String {
    (0..rng.random_range(0..3)).map(|_| *LABEL_PIECES.choose(rng).unwrap()).collect()
}

fn kind_of<R: Rng>(rng: &mut R, top: TopLevel) -> NodeKind {
    let choices: Vec<NodeKind> = ALL_KINDS.into_iter().filter(|k| k.top_level() == top).collect();
    *choices.choose(rng).unwrap()
}

/// A random valid graph with up to `max_nodes` nodes. Every node carries a
/// `ts_ms` attribute and most carry a `chain` attribute from a small pool.
pub fn random_graph<R: Rng>(rng: &mut R, max_nodes: usize) -> ProvGraph {
    let mut g = ProvGraph::new();
    let ext = rng.random_bool(0.3);
    if ext {
        g.declare_namespace("vt", "http://www.vistrails.org/registry.xsd");
    }
    let n = rng.random_range(1..=max_nodes.max(1));
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let top = match rng.random_range(0..10) {
            0..=4 => TopLevel::Entity,
            5..=7 => TopLevel::Activity,
            _ => TopLevel::Agent,
        };
        let kind = kind_of(rng, top);
        let id = NodeId::new(format!("n{i}")).unwrap();
        let mut node = ProvNode::new(id.clone(), kind, label(rng)).with_attr("ts_ms", rng.random_range(0..100_000i64).to_string());
        if rng.random_bool(0.8) {
            node = node.with_attr("chain", format!("c{}", rng.random_range(0..4)));
        }
        if kind == NodeKind::VideoFeed {
            let s = rng.random_range(0..50_000i64);
            node = node
                .with_attr("video_ref", "game.mp4")
                .with_attr("start_ms", s.to_string())
                .with_attr("end_ms", (s + rng.random_range(0..5000)).to_string());
        }
        if ext && rng.random_bool(0.3) {
            node = node.with_attr("vt:desc", label(rng));
        }
        if rng.random_bool(0.2) {
            node = node.with_attr("note", label(rng));
        }
        g.add_node(node).unwrap();
        ids.push((id, kind));
    }
    let edges = rng.random_range(0..=n * 2);
    for _ in 0..edges {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let relation = *Relation::ALL.choose(rng).unwrap();
        let (ws, wd) = relation.endpoints();
        let (src, dst) = if relation.is_dependency() {
            // newer depends on older keeps the graph acyclic
            (a.max(b), a.min(b))
        } else {
            (a, b)
        };
        let ((s_id, s_kind), (d_id, d_kind)) = (&ids[src], &ids[dst]);
        if s_kind.top_level() != ws || d_kind.top_level() != wd || (relation.is_dependency() && src == dst) {
            continue;
        }
        if relation == Relation::WasGeneratedBy && g.generator(s_id.as_str()).is_some() {
            continue;
        }
        let connection = match rng.random_range(0..3) {
            0 => None,
            1 => Some(ConnectionClass::DataDependency),
            _ if s_kind.is_physical() && d_kind.is_physical() => Some(ConnectionClass::PhysicalCausality),
            _ => Some(ConnectionClass::DataDependency),
        };
        let mut edge = ProvEdge::new(s_id.clone(), d_id.clone(), EdgeKind { relation, connection });
        if rng.random_bool(0.2) {
            edge.label = Some(label(rng));
        }
        if rng.random_bool(0.1) {
            edge = edge.with_attr("weight", rng.random_range(0..10).to_string());
        }
        g.add_edge(edge).unwrap();
    }
    g
}

/// A random in-order event stream. Actions only follow an open chain.
pub fn random_stream<R: Rng>(rng: &mut R, len: usize, players: &[&str]) -> Vec<GameEvent> {
    let mut out = Vec::with_capacity(len);
    let mut ts = 0i64;
    let mut open = false;
    let mut started = false;
    for i in 0..len {
        ts += rng.random_range(0..1500);
        let id = format!("e{i:05}");
        let p = *players.choose(rng).unwrap();
        let kind = if !open && !started {
            EventKind::CentreBounce
        } else if !open {
            *[EventKind::CentreBounce, EventKind::WindGust].choose(rng).unwrap()
        } else {
            match rng.random_range(0..20) {
                0..=1 => EventKind::CentreBounce,
                2..=9 => EventKind::Kick,
                10..=12 => EventKind::Tap,
                13..=14 => EventKind::Mark,
                15 => EventKind::Goal,
                16 => EventKind::Behind,
                17 => EventKind::Injury,
                _ => EventKind::WindGust,
            }
        };
        let player = kind.requires_player().then_some(p);
        let mut ev = GameEvent::new(id, ts, kind, player);
        if kind == EventKind::WindGust && rng.random_bool(0.5) {
            ev = ev.with_attr("influence", "true");
        }
        if kind == EventKind::Injury {
            ev = ev.with_attr("body_part", ["knee", "ankle", "hamstring"].choose(rng).unwrap());
        }
        if kind == EventKind::Kick && rng.random_bool(0.5) {
            ev = ev.with_target(players.choose(rng).unwrap());
        }
        match kind {
            EventKind::CentreBounce => {
                open = true;
                started = true;
            }
            k if k.is_score() => open = false,
            _ => {}
        }
        out.push(ev);
    }
    out
}

/// A random pipeline of at most eight steps over the builtins, with the root
/// inputs it needs.
#[derive(Debug, Clone)]
pub struct PipelineCase {
    pub def: WorkflowDef,
    pub stream: Vec<GameEvent>,
    pub players: Vec<String>,
    pub inputs: BTreeMap<String, Value>,
}

/// One change to a running pipeline.
#[derive(Debug, Clone)]
pub enum Mutation {
    /// Load only the first `n` events of the stream.
    Events(usize),
    Sensor(String),
    Override(Override),
    /// Replace one parameter of an automated step.
    EditParam { step: String, key: String, value: serde_json::Value },
    /// Set an input to the value it already has.
    Noop,
}

pub fn random_sensor_csv<R: Rng>(rng: &mut R, horizon: i64) -> String {
    let mut s = String::from("start_ms,end_ms,wind\n");
    for _ in 0..rng.random_range(1..4) {
        let a = rng.random_range(0..horizon.max(1));
        let b = a + rng.random_range(0..horizon.max(1) / 2 + 1);
        s.push_str(&format!("{a},{b},{}\n", ["low", "moderate", "high"].choose(rng).unwrap()));
    }
    s
}

fn random_filter<R: Rng>(rng: &mut R, players: &[String]) -> Vec<(&'static str, serde_json::Value)> {
    match rng.random_range(0..3) {
        0 => vec![("field", json!("kind")), ("op", json!("in")), ("value", json!(["goal", "behind", "kick"]))],
        1 => vec![("field", json!("ts_ms")), ("op", json!("ge")), ("value", json!(rng.random_range(0..20_000)))],
        _ => vec![("field", json!("player")), ("op", json!("ne")), ("value", json!(players.choose(rng).unwrap()))],
    }
}

pub fn random_pipeline<R: Rng>(rng: &mut R) -> PipelineCase {
    let players: Vec<String> = (1..=rng.random_range(2..6)).map(|i| format!("P{i}")).collect();
    let refs: Vec<&str> = players.iter().map(String::as_str).collect();
    let len = rng.random_range(10..120);
    let stream = random_stream(rng, len, &refs);
    let horizon = stream.last().map_or(1, |e| e.ts_ms + 1);

    let mut def = WorkflowDef::new("case").step(StepDef::automated("s0", "load_events"));
    // output slots by type: (step, port)
    let mut events = vec![("s0".to_string(), "events")];
    // event outputs still carrying player ids
    let mut raw = events.clone();
    let mut tables: Vec<(String, &str, PortType)> = vec![("s0".into(), "events", PortType::Events)];
    let mut sensor: Option<String> = None;
    let steps = rng.random_range(1..8);
    for i in 1..=steps {
        let id = format!("s{i}");
        let pick = rng.random_range(0..7);
        let (from, fport) = events.choose(rng).unwrap().clone();
        match pick {
            0 => {
                let mut s = StepDef::automated(&id, "filter_events");
                for (k, v) in random_filter(rng, &players) {
                    s = s.param(k, v);
                }
                def = def.step(s).edge((&from, fport), (&id, "events"));
                events.push((id.clone(), "events"));
                if raw.contains(&(from.clone(), fport)) {
                    raw.push((id.clone(), "events"));
                }
                tables.push((id, "events", PortType::Events));
            }
            1 => {
                let by = *["kind", "player"].choose(rng).unwrap();
                def = def.step(StepDef::automated(&id, "count_by").param("by", json!(by))).edge((&from, fport), (&id, "events"));
                tables.push((id, "table", PortType::Table));
            }
            2 => {
                let s = StepDef::automated(&id, "compute_goal_pct").param("exclude_high_wind", json!(rng.random_bool(0.5)));
                def = def.step(s).edge((&from, fport), (&id, "events"));
                tables.push((id, "metric", PortType::Metric));
            }
            3 => {
                let src = match &sensor {
                    Some(s) => s.clone(),
                    None => {
                        let s = format!("s{i}t");
                        def = def.step(StepDef::automated(&s, "load_table"));
                        tables.push((s.clone(), "table", PortType::Table));
                        sensor = Some(s.clone());
                        s
                    }
                };
                def = def
                    .step(StepDef::automated(&id, "annotate_conditions"))
                    .edge((&from, fport), (&id, "events"))
                    .edge((&src, "table"), (&id, "conditions"));
                events.push((id.clone(), "events"));
                if raw.contains(&(from.clone(), fport)) {
                    raw.push((id.clone(), "events"));
                }
                tables.push((id, "events", PortType::Events));
            }
            4 => {
                let (from, fport) = raw.choose(rng).unwrap().clone();
                def = def
                    .step(StepDef::automated(&id, "join_mapping").param("direction", json!("forward")))
                    .edge((&from, fport), (&id, "data"));
                events.push((id.clone(), "data"));
                tables.push((id, "data", PortType::Events));
            }
            _ => {
                let (src, port, ty) = tables.choose(rng).unwrap().clone();
                def = def.step(StepDef::automated(&id, "export_table").input("table", ty)).edge((&src, port), (&id, "table"));
            }
        }
        if def.steps.len() >= 8 {
            break;
        }
    }
    let def = def.normalized().expect("generated pipelines are well formed");
    let mut inputs = BTreeMap::from([("jsonl".to_string(), Value::Str(write_events_jsonl(&stream)))]);
    let roots = def.roots();
    if roots.contains_key("csv") {
        inputs.insert("csv".into(), Value::Str(random_sensor_csv(rng, horizon)));
    }
    if roots.contains_key("mapping") {
        let map = make_map(refs.iter().copied(), &rng.random::<[u8; 8]>()).expect("non-empty roster");
        inputs.insert("mapping".into(), Value::Mapping(map));
    }
    PipelineCase { def, stream, players, inputs }
}

pub fn random_mutation<R: Rng>(rng: &mut R, case: &PipelineCase, def: &WorkflowDef) -> Mutation {
    let horizon = case.stream.last().map_or(1, |e| e.ts_ms + 1);
    match rng.random_range(0..10) {
        0..=2 => Mutation::Events(rng.random_range(1..=case.stream.len())),
        3 if def.roots().contains_key("csv") => Mutation::Sensor(random_sensor_csv(rng, horizon)),
        4..=6 => {
            let mut slots: Vec<(String, PortType, Option<&str>)> = def
                .steps
                .iter()
                .flat_map(|s| s.outputs.iter().map(move |(p, ty)| (format!("{}.{p}", s.step_id), *ty, s.builtin())))
                .collect();
            slots.push(("jsonl".into(), PortType::Str, None));
            let (slot, ty, builtin) = slots.choose(rng).unwrap().clone();
            let player = case.players.choose(rng).unwrap();
            let replacement = match (ty, builtin) {
                (PortType::Events, _) => {
                    let id = if rng.random_bool(0.5) { format!("e{:05}", rng.random_range(0..case.stream.len())) } else { "extra".into() };
                    Replacement::Patch {
                        key: vec!["event_id".into()],
                        rows: vec![BTreeMap::from([
                            ("event_id".to_string(), json!(id)),
                            ("ts_ms".to_string(), json!(rng.random_range(0..horizon))),
                            ("kind".to_string(), json!(*["goal", "behind"].choose(rng).unwrap())),
                            ("player".to_string(), json!(player)),
                        ])],
                    }
                }
                (PortType::Table, Some("load_table")) => Replacement::Patch {
                    key: vec!["start_ms".into(), "end_ms".into()],
                    rows: vec![BTreeMap::from([
                        ("start_ms".to_string(), json!(0)),
                        ("end_ms".to_string(), json!(rng.random_range(0..horizon))),
                        ("wind".to_string(), json!("high")),
                    ])],
                },
                (PortType::Table, _) => Replacement::Patch {
                    key: vec!["count".into()],
                    rows: vec![BTreeMap::from([("count".to_string(), json!(rng.random_range(0..3)))])],
                },
                (PortType::Metric, _) => Replacement::Patch {
                    key: vec!["player".into()],
                    rows: vec![BTreeMap::from([
                        ("player".to_string(), json!(player)),
                        ("goal_pct".to_string(), json!(50.0)),
                    ])],
                },
                (_, None) => {
                    let n = rng.random_range(1..=case.stream.len());
                    Replacement::Replace { value: Value::Str(write_events_jsonl(&case.stream[..n])) }
                }
                _ => Replacement::Replace { value: Value::Str(format!("edited {}\n", rng.random_range(0..3))) },
            };
            Mutation::Override(Override {
                target: slot,
                replacement,
                reason: "random".into(),
                author: "tester".into(),
                sticky: rng.random_bool(0.5),
            })
        }
        7..=8 => {
            let editable: Vec<&StepDef> = def
                .steps
                .iter()
                .filter(|s| matches!(s.builtin(), Some("filter_events" | "count_by" | "compute_goal_pct")))
                .collect();
            let Some(step) = editable.choose(rng) else { return Mutation::Noop };
            let (key, value) = match step.builtin() {
                Some("count_by") => ("by", json!(*["kind", "player"].choose(rng).unwrap())),
                Some("compute_goal_pct") => ("exclude_high_wind", json!(rng.random_bool(0.5))),
                _ => ("value", json!(rng.random_range(0..20_000))),
            };
            // a numeric value only makes sense for the timestamp filter
            if key == "value" && step.params().and_then(|p| p.get("field")) != Some(&json!("ts_ms")) {
                return Mutation::Noop;
            }
            Mutation::EditParam { step: step.step_id.clone(), key: key.into(), value }
        }
        _ => Mutation::Noop,
    }
}
