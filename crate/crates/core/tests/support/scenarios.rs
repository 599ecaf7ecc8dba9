//! Fixture game, the Goal% pipeline and end-to-end checks built on them.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::{json, Value as Json};
use sportprov::game::{read_events_jsonl, write_events_jsonl, GameIngest, Roster};
use sportprov::graph::{EdgeKind, NodeId, NodeKind, ProvEdge, ProvGraph, ProvNode, Relation};
use sportprov::privacy::{deidentify, export_partial, make_map, merge_external, reidentify, PLAYER_COLUMNS};
use sportprov::query::drill_down;
use sportprov::sprov::ProvDocument;
use sportprov::table::Table;
use sportprov::testkit::{random_sensor_csv, random_stream, rng};
use sportprov::workflow::{Engine, Override, Replacement, RunReport, RunStatus, Value, WorkflowDef};

pub const WF: &str = "goal_pct";
pub const FIXTURE_PLAYERS: [&str; 4] = ["P3", "P5", "P7", "P12"];

pub fn fixture(name: &str) -> String {
    let path = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn pipeline() -> WorkflowDef {
    serde_json::from_str(&fixture("goal_pct.workflow.json")).unwrap()
}

pub fn inputs_for(jsonl: &str, csv: &str, players: &[&str], seed: &[u8]) -> BTreeMap<String, Value> {
    let map = make_map(players.iter().copied(), seed).unwrap();
    BTreeMap::from([
        ("jsonl".to_string(), Value::Str(jsonl.to_string())),
        ("csv".to_string(), Value::Str(csv.to_string())),
        ("mapping".to_string(), Value::Mapping(map)),
    ])
}

pub fn inputs(jsonl: &str, csv: &str) -> BTreeMap<String, Value> {
    inputs_for(jsonl, csv, &FIXTURE_PLAYERS, b"club-seed")
}

pub fn game_graph(jsonl: &str) -> ProvGraph {
    let mut g = ProvGraph::new();
    let events = read_events_jsonl(jsonl).unwrap();
    GameIngest::new("round7", Roster::open()).ingest_all(&mut g, &events).unwrap();
    g
}

/// Goal% straight from the event file: goals and behinds per player, behinds
/// inside a high-wind window dropped, rounded half up in tenths.
pub fn oracle_pct(jsonl: &str, high: &[(i64, i64)]) -> BTreeMap<String, Option<f64>> {
    let mut tally: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for line in jsonl.lines().filter(|l| !l.is_empty()) {
        let v: Json = serde_json::from_str(line).unwrap();
        let (kind, ts) = (v["kind"].as_str().unwrap(), v["ts_ms"].as_i64().unwrap());
        let Some(p) = v["player"].as_str() else { continue };
        match kind {
            "goal" => tally.entry(p.into()).or_default().0 += 1,
            "behind" if high.iter().any(|&(a, b)| a <= ts && ts <= b) => {
                tally.entry(p.into()).or_default();
            }
            "behind" => tally.entry(p.into()).or_default().1 += 1,
            _ => {}
        }
    }
    tally
        .into_iter()
        .map(|(p, (g, b))| {
            let n = g + b;
            let pct = (n > 0).then(|| {
                let tenths = (1000 * g) / n + u64::from(2 * ((1000 * g) % n) >= n);
                tenths as f64 / 10.0
            });
            (p, pct)
        })
        .collect()
}

pub fn pct_table(engine: &Engine, wf: &str) -> BTreeMap<String, Option<f64>> {
    let v = engine.slot_value(wf, "reid.data").unwrap().unwrap();
    let t = v.as_table().unwrap();
    t.records().map(|r| (r["player"].as_str().unwrap().to_string(), r["goal_pct"].as_f64())).collect()
}

pub fn wind_override(sticky: bool) -> Override {
    Override {
        target: "sensor.table".into(),
        replacement: Replacement::Patch {
            key: vec!["start_ms".into(), "end_ms".into()],
            rows: vec![BTreeMap::from([
                ("start_ms".to_string(), json!(17000)),
                ("end_ms".to_string(), json!(21000)),
                ("wind".to_string(), json!("high")),
            ])],
        },
        reason: "sensor missed the gust".into(),
        author: "analyst_kim".into(),
        sticky,
    }
}

/// Nodes reachable from `from` along dependency edges.
pub fn reach(g: &ProvGraph, from: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from.to_string()];
    while let Some(n) = stack.pop() {
        for e in g.out_edges(&n).filter(|e| e.kind.relation.is_dependency()) {
            if seen.insert(e.dst.to_string()) {
                stack.push(e.dst.to_string());
            }
        }
    }
    seen
}

/// Every output of `report` must reach the activity that made it, the root
/// entities read by it or anything upstream, and, when events were read, the
/// game states of all events in the input.
pub fn check_complete(g: &ProvGraph, def: &WorkflowDef, report: &RunReport, event_ids: &[String]) -> Result<usize, String> {
    let roots: BTreeMap<String, BTreeSet<String>> = report
        .steps
        .iter()
        .map(|s| {
            let mut up: BTreeSet<String> = BTreeSet::from([s.step_id.clone()]);
            loop {
                let before = up.len();
                for e in &def.edges {
                    if up.contains(&e.to.step) {
                        up.insert(e.from.step.clone());
                    }
                }
                if up.len() == before {
                    break;
                }
            }
            let roots = def
                .steps
                .iter()
                .filter(|d| up.contains(&d.step_id))
                .flat_map(|d| d.inputs.keys().filter(|p| def.feeder(&d.step_id, p).is_none()).cloned())
                .collect();
            (s.step_id.clone(), roots)
        })
        .collect();
    let mut checked = 0;
    for s in &report.steps {
        let Some(act) = &s.activity else { continue };
        for entity in s.outputs.values() {
            let r = reach(g, entity);
            if !r.contains(act) {
                return Err(format!("{entity} does not reach its activity {act}"));
            }
            for root in &roots[&s.step_id] {
                let found = r.iter().any(|n| {
                    g.node(n).is_some_and(|n| n.attr("slot") == Some(root.as_str()) && n.attr("workflow") == Some(def.workflow_id.as_str()))
                });
                if !found {
                    return Err(format!("{entity} does not reach root input {root}"));
                }
            }
            if roots[&s.step_id].contains("jsonl") {
                if let Some(missing) = event_ids.iter().find(|e| !r.contains(*e)) {
                    return Err(format!("{entity} does not reach event {missing}"));
                }
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Wind scenario: override the sensor reading, recompute, resynchronise the
/// sensor file, recompute. Returns Goal% per player at the end.
pub fn override_persistence() -> Result<BTreeMap<String, Option<f64>>, String> {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    let e = |e: sportprov::workflow::WorkflowError| e.to_string();
    engine.define(&mut g, pipeline()).map_err(e)?;
    engine.execute(&mut g, WF, inputs(&jsonl, &fixture("sensor.csv"))).map_err(e)?;
    let before = pct_table(&engine, WF);
    engine.apply_override(&mut g, WF, wind_override(true)).map_err(e)?;
    engine.recompute_dirty(&mut g, WF).map_err(e)?;
    let overridden = pct_table(&engine, WF);
    let synced = format!("{}120000,180000,low\n", fixture("sensor.csv"));
    engine.set_inputs(&mut g, WF, BTreeMap::from([("csv".to_string(), Value::Str(synced))])).map_err(e)?;
    let report = engine.recompute_dirty(&mut g, WF).map_err(e)?;
    if !report.recomputed.iter().any(|s| s == "sensor") {
        return Err("sensor file change did not rerun the sensor step".into());
    }
    let after = pct_table(&engine, WF);
    let want = oracle_pct(&jsonl, &[(17000, 21000)]);
    if after != want || overridden != want {
        return Err(format!("expected {want:?}, got {overridden:?} then {after:?}"));
    }
    if after == before {
        return Err("override had no effect on Goal%".into());
    }
    let table = engine.slot_value(WF, "sensor.table").map_err(e)?.ok_or("no sensor table")?;
    let high = table.as_table().unwrap().records().filter(|r| r["wind"] == "high").count();
    if high != 1 {
        return Err(format!("override row missing from the resynchronised sensor table ({high} high rows)"));
    }
    Ok(after)
}

/// Provenance completeness across all runs of the wind scenario.
pub fn fixture_completeness() -> Result<usize, String> {
    let jsonl = fixture("game.jsonl");
    let ids: Vec<String> = read_events_jsonl(&jsonl).unwrap().into_iter().map(|e| e.event_id).collect();
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    let e = |e: sportprov::workflow::WorkflowError| e.to_string();
    engine.define(&mut g, pipeline()).map_err(e)?;
    let def = engine.definition(WF).map_err(e)?.clone();
    let mut reports = vec![engine.execute(&mut g, WF, inputs(&jsonl, &fixture("sensor.csv"))).map_err(e)?];
    engine.apply_override(&mut g, WF, wind_override(true)).map_err(e)?;
    reports.push(engine.recompute_dirty(&mut g, WF).map_err(e)?);
    let synced = format!("{}120000,180000,low\n", fixture("sensor.csv"));
    engine.set_inputs(&mut g, WF, BTreeMap::from([("csv".to_string(), Value::Str(synced))])).map_err(e)?;
    reports.push(engine.recompute_dirty(&mut g, WF).map_err(e)?);
    let mut checked = 0;
    for r in &reports {
        if r.status != RunStatus::Ok {
            return Err(format!("{} ended {:?}", r.run_id, r.status));
        }
        checked += check_complete(&g, &def, r, &ids)?;
    }
    let problems = g.validate();
    if !problems.is_empty() {
        return Err(format!("graph invalid: {problems:?}"));
    }
    Ok(checked)
}

const SURNAMES: [&str; 16] = [
    "Okafor", "Nguyen", "Walsh", "Riewoldt", "Dangerfield", "Petracca", "Bontempelli", "Heeney", "Cripps", "Oliver",
    "Daicos", "Naughton", "Hawkins", "Macrae", "Parish", "Rioli",
];

/// A roster of distinct, recognisable player ids.
pub fn random_roster<R: Rng>(rng: &mut R) -> Vec<String> {
    let n = rng.random_range(2..=24);
    let mut ids = BTreeSet::new();
    while ids.len() < n {
        ids.insert(format!("{}{}", SURNAMES.choose(rng).unwrap(), rng.random_range(1..=45)));
    }
    ids.into_iter().collect()
}

/// Run the pipeline on a random game for a random roster, share it from the
/// de-identification step and scan the shared text for player ids.
pub fn leak_case(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let roster = random_roster(&mut r);
    let players: Vec<&str> = roster.iter().map(String::as_str).collect();
    let len = r.random_range(20..150);
    let stream = random_stream(&mut r, len, &players);
    let horizon = stream.last().map_or(1, |e| e.ts_ms + 1);
    let jsonl = write_events_jsonl(&stream);

    let mut g = ProvGraph::new();
    GameIngest::new("g", Roster::closed(players.iter().copied())).ingest_all(&mut g, &stream).map_err(|e| e.to_string())?;
    let mut engine = Engine::new();
    engine.define(&mut g, pipeline()).map_err(|e| e.to_string())?;
    let seed_bytes = seed.to_be_bytes();
    let report = engine
        .execute(&mut g, WF, inputs_for(&jsonl, &random_sensor_csv(&mut r, horizon), &players, &seed_bytes))
        .map_err(|e| e.to_string())?;
    if report.status != RunStatus::Ok {
        return Err(format!("run ended {:?}", report.status));
    }
    let deid = report.step("deid").and_then(|s| s.activity.clone()).ok_or("no deid activity")?;
    let text = export_partial(&g, [deid.as_str()]).map_err(|e| e.to_string())?.to_text();
    let metric = &report.step("goal_pct").ok_or("no goal_pct step")?.outputs["metric"];
    if !text.contains(metric.as_str()) {
        return Err("shared document lacks the de-identified metric".into());
    }
    if let Some(p) = players.iter().find(|p| text.contains(**p)) {
        return Err(format!("player id {p} appears in the shared document"));
    }

    let map = make_map(players.iter().copied(), &seed_bytes).map_err(|e| e.to_string())?;
    let table = Table::from_events(&stream);
    let anon = deidentify(&table, &map, &PLAYER_COLUMNS).map_err(|e| e.to_string())?;
    if let Some(p) = players.iter().find(|p| anon.to_csv().contains(**p)) {
        return Err(format!("player id {p} survives de-identification"));
    }
    if reidentify(&anon, &map, &PLAYER_COLUMNS).map_err(|e| e.to_string())? != table {
        return Err("re-identification is not the inverse of de-identification".into());
    }
    Ok(())
}

/// Share the fixture run, let a collaborator derive a finding from the shared
/// metric, merge it back. Returns (clips from the merged graph, clips from the
/// collaborator's document alone).
pub fn merge_case() -> Result<(usize, usize), String> {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    engine.define(&mut g, pipeline()).map_err(|e| e.to_string())?;
    let report = engine.execute(&mut g, WF, inputs(&jsonl, &fixture("sensor.csv"))).map_err(|e| e.to_string())?;
    let deid = report.step("deid").and_then(|s| s.activity.clone()).ok_or("no deid activity")?;
    let metric = report.step("goal_pct").ok_or("no goal_pct step")?.outputs["metric"].clone();
    let shared = export_partial(&g, [deid.as_str()]).map_err(|e| e.to_string())?;

    let mut ext = ProvDocument::parse(&shared.to_text()).and_then(|d| d.to_graph()).map_err(|e| e.to_string())?;
    let id = |s: &str| NodeId::new(s).unwrap();
    let add = |ext: &mut ProvGraph, n: ProvNode| ext.add_node(n).map(|_| ()).map_err(|e| e.to_string());
    add(&mut ext, ProvNode::new(id("uni.regression"), NodeKind::Computation, "accuracy regression"))?;
    add(&mut ext, ProvNode::new(id("uni.finding"), NodeKind::Metric, "accuracy vs wind"))?;
    add(&mut ext, ProvNode::new(id("uni.lab"), NodeKind::Human, "university lab"))?;
    for (s, t, rel) in [
        ("uni.regression", metric.as_str(), Relation::Used),
        ("uni.finding", "uni.regression", Relation::WasGeneratedBy),
        ("uni.regression", "uni.lab", Relation::WasAssociatedWith),
    ] {
        ext.add_edge(ProvEdge::new(id(s), id(t), EdgeKind::data(rel))).map_err(|e| e.to_string())?;
    }
    let external = ProvDocument::from_graph(&ext);
    let alone = drill_down(&ext, "uni.finding").map_err(|e| e.to_string())?.len();
    let merged = merge_external(&g, &external).map_err(|e| e.to_string())?;
    let problems = merged.validate();
    if !problems.is_empty() {
        return Err(format!("merged graph invalid: {problems:?}"));
    }
    let clips = drill_down(&merged, "uni.finding").map_err(|e| e.to_string())?;
    Ok((clips.len(), alone))
}
