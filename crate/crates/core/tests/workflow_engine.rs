#[path = "support/scenarios.rs"]
mod scenarios;

use std::collections::{BTreeMap, BTreeSet};

use scenarios::{fixture, game_graph, inputs, oracle_pct, pct_table, pipeline, wind_override};
use serde_json::json;
use sportprov::graph::{ProvGraph, Relation};
use sportprov::privacy::make_map;
use sportprov::query::drill_down;
use sportprov::workflow::{
    Engine, PortType, Replacement, RunStatus, StepDef, StepStatus, Value, WorkflowDef, WorkflowError,
};

fn step_ids(def: &WorkflowDef) -> BTreeSet<String> {
    def.steps.iter().map(|s| s.step_id.clone()).collect()
}

/// Steps reachable from `seeds` along workflow edges, by plain search.
fn closure(def: &WorkflowDef, seeds: &[&str]) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = seeds.iter().map(|s| s.to_string()).collect();
    loop {
        let before = out.len();
        for e in &def.edges {
            if out.contains(&e.from.step) {
                out.insert(e.to.step.clone());
            }
        }
        if out.len() == before {
            return out;
        }
    }
}

#[test]
fn goal_pct_for_the_fixture_game() {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    assert_eq!(engine.define(&mut g, pipeline()).unwrap(), 1);
    let report = engine.execute(&mut g, "goal_pct", inputs(&jsonl, &fixture("sensor.csv"))).unwrap();
    assert_eq!(report.status, RunStatus::Ok, "{report:#?}");
    assert_eq!(report.recomputed.len(), 8);

    let pct = pct_table(&engine, "goal_pct");
    assert_eq!(pct, oracle_pct(&jsonl, &[]));
    assert_eq!(pct["P7"], Some(75.0));

    let csv = engine.slot_value("goal_pct", "export.csv").unwrap().unwrap();
    assert!(csv.as_str().unwrap().lines().any(|l| l == "P7,3,1,75.0"));
    // the de-identified metric carries codes, not player ids
    let anon = engine.slot_value("goal_pct", "goal_pct.metric").unwrap().unwrap();
    let text = serde_json::to_string(&anon).unwrap();
    assert!(!text.contains("\"P7\"") && !text.contains("\"P12\""));
    assert!(g.validate().is_empty());
}

#[test]
fn identical_inputs_hit_the_cache() {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    engine.define(&mut g, pipeline()).unwrap();
    let first = engine.execute(&mut g, "goal_pct", inputs(&jsonl, &fixture("sensor.csv"))).unwrap();
    let nodes = g.node_count();
    let again = engine.execute(&mut g, "goal_pct", inputs(&jsonl, &fixture("sensor.csv"))).unwrap();
    assert!(again.recomputed.is_empty());
    assert_eq!(again.cached.len(), 8);
    for s in &again.steps {
        assert!(s.cached);
        assert_eq!(s.output_digests, first.step(&s.step_id).unwrap().output_digests);
    }
    assert_eq!(g.node_count(), nodes);

    let noop = engine.recompute_dirty(&mut g, "goal_pct").unwrap();
    assert!(noop.recomputed.is_empty());
    assert_eq!(noop.status, RunStatus::Ok);
}

#[test]
fn new_goal_reruns_only_what_reads_events() {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    engine.define(&mut g, pipeline()).unwrap();
    engine.execute(&mut g, "goal_pct", inputs(&jsonl, &fixture("sensor.csv"))).unwrap();

    let more = format!(
        "{jsonl}{}\n{}\n{}\n",
        r#"{"event_id":"bounce_7","ts_ms":50000,"kind":"centre_bounce","video_ref":"round7.mp4"}"#,
        r#"{"event_id":"kick_9","ts_ms":51000,"kind":"kick","player":"P12","video_ref":"round7.mp4"}"#,
        r#"{"event_id":"goal_5","ts_ms":52000,"kind":"goal","player":"P12","video_ref":"round7.mp4"}"#,
    );
    let changed = engine
        .set_inputs(&mut g, "goal_pct", BTreeMap::from([("jsonl".to_string(), Value::Str(more.clone()))]))
        .unwrap();
    assert_eq!(changed, ["jsonl"]);
    let def = pipeline();
    let expected = closure(&def, &["events"]);
    assert_eq!(engine.dirty_steps("goal_pct").unwrap(), expected);
    let report = engine.recompute_dirty(&mut g, "goal_pct").unwrap();
    assert_eq!(report.recomputed.iter().cloned().collect::<BTreeSet<_>>(), expected);
    assert_eq!(report.cached, ["sensor"]);

    // same answer as a clean engine over the longer file
    let mut g2 = game_graph(&more);
    let mut fresh = Engine::new();
    fresh.define(&mut g2, pipeline()).unwrap();
    fresh.execute(&mut g2, "goal_pct", inputs(&more, &fixture("sensor.csv"))).unwrap();
    assert_eq!(pct_table(&engine, "goal_pct"), pct_table(&fresh, "goal_pct"));
    assert_eq!(pct_table(&engine, "goal_pct")["P12"], Some(100.0));
}

#[test]
fn sticky_wind_override_survives_reingest() {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    engine.define(&mut g, pipeline()).unwrap();
    engine.execute(&mut g, "goal_pct", inputs(&jsonl, &fixture("sensor.csv"))).unwrap();
    let def = engine.definition("goal_pct").unwrap().clone();

    let receipt = engine.apply_override(&mut g, "goal_pct", wind_override(true)).unwrap();
    let expected = closure(&def, &["conditions"]);
    assert_eq!(receipt.dirty_steps.iter().cloned().collect::<BTreeSet<_>>(), expected);
    assert!(expected.len() < step_ids(&def).len());
    assert!(engine.is_dirty("goal_pct").unwrap());

    // the revision is derived from the original and attributed to the author
    let rev = receipt.revision.clone().unwrap();
    let base = g.out_edges(&rev).find(|e| e.kind.relation == Relation::WasDerivedFrom).unwrap().dst.clone();
    assert!(base.as_str().ends_with(".sensor.table"));
    let act = g.generator(&rev).unwrap().clone();
    assert_eq!(g.associated_agents(act.as_str()).map(|a| a.as_str()).collect::<Vec<_>>(), ["analyst_kim"]);

    let report = engine.recompute_dirty(&mut g, "goal_pct").unwrap();
    assert_eq!(report.recomputed.iter().cloned().collect::<BTreeSet<_>>(), expected);
    assert!(!engine.is_dirty("goal_pct").unwrap());
    let pct = pct_table(&engine, "goal_pct");
    assert_eq!(pct, oracle_pct(&jsonl, &[(17000, 21000)]));
    assert_eq!(pct["P7"], Some(100.0));

    // the sensor file is synchronised again with an extra reading
    let synced = format!("{}120000,180000,low\n", fixture("sensor.csv"));
    engine
        .set_inputs(&mut g, "goal_pct", BTreeMap::from([("csv".to_string(), Value::Str(synced))]))
        .unwrap();
    let report = engine.recompute_dirty(&mut g, "goal_pct").unwrap();
    assert!(report.recomputed.contains(&"sensor".to_string()));
    assert_eq!(pct_table(&engine, "goal_pct")["P7"], Some(100.0));
    let conditions = engine.slot_value("goal_pct", "sensor.table").unwrap().unwrap();
    assert_eq!(conditions.as_table().unwrap().len(), 4);
    // a second revision sits on top of the new sensor data
    let seen = &report.step("sensor").unwrap().outputs["table"];
    assert!(seen.contains(".r3.sensor.table.ov"), "{seen}");
}

#[test]
fn plain_override_lapses_when_source_changes() {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    engine.define(&mut g, pipeline()).unwrap();
    engine.execute(&mut g, "goal_pct", inputs(&jsonl, &fixture("sensor.csv"))).unwrap();
    engine.apply_override(&mut g, "goal_pct", wind_override(false)).unwrap();
    engine.recompute_dirty(&mut g, "goal_pct").unwrap();
    assert_eq!(pct_table(&engine, "goal_pct")["P7"], Some(100.0));
    let synced = format!("{}120000,180000,low\n", fixture("sensor.csv"));
    engine
        .set_inputs(&mut g, "goal_pct", BTreeMap::from([("csv".to_string(), Value::Str(synced))]))
        .unwrap();
    engine.recompute_dirty(&mut g, "goal_pct").unwrap();
    assert_eq!(pct_table(&engine, "goal_pct")["P7"], Some(75.0));
}

#[test]
fn override_targets() {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    engine.define(&mut g, pipeline()).unwrap();

    // nothing has run yet, so there is no sensor table to override
    let err = engine.apply_override(&mut g, "goal_pct", wind_override(true)).unwrap_err();
    assert_eq!(err, WorkflowError::UnknownEntity("sensor.table".into()));

    let report = engine.execute(&mut g, "goal_pct", inputs(&jsonl, &fixture("sensor.csv"))).unwrap();
    let mut ov = wind_override(true);
    ov.target = "no_such_entity".into();
    assert_eq!(
        engine.apply_override(&mut g, "goal_pct", ov).unwrap_err(),
        WorkflowError::UnknownEntity("no_such_entity".into())
    );

    // by entity id
    let mut ov = wind_override(true);
    ov.target = report.step("sensor").unwrap().outputs["table"].clone();
    let receipt = engine.apply_override(&mut g, "goal_pct", ov).unwrap();
    assert_eq!(receipt.slot, "sensor.table");

    // a root input
    let mut ov = wind_override(true);
    ov.target = "csv".into();
    ov.replacement = Replacement::Replace { value: Value::Str("start_ms,end_ms,wind\n0,60000,high\n".into()) };
    let receipt = engine.apply_override(&mut g, "goal_pct", ov).unwrap();
    assert_eq!(receipt.dirty_steps.iter().cloned().collect::<BTreeSet<_>>(), closure(&pipeline(), &["sensor"]));

    let mut ov = wind_override(true);
    ov.target = "csv".into();
    ov.replacement = Replacement::Replace { value: Value::Int(3) };
    assert!(matches!(engine.apply_override(&mut g, "goal_pct", ov), Err(WorkflowError::SchemaMismatch { .. })));
}

fn manual_def() -> WorkflowDef {
    WorkflowDef::new("review")
        .step(StepDef::automated("events", "load_events"))
        .step(
            StepDef::manual("annotate", "confirm the wind reading for the quarter")
                .input("events", PortType::Events)
                .output("wind", PortType::Str)
                .output("confirmed", PortType::Bool),
        )
        .step(StepDef::automated("count", "count_by").param("by", json!("kind")))
        .edge(("events", "events"), ("annotate", "events"))
        .edge(("events", "events"), ("count", "events"))
}

#[test]
fn manual_steps_wait_for_a_person() {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    let def = manual_def()
        .step(StepDef::automated("export", "export_table"))
        .step(StepDef::manual("sign_off", "sign off").input("csv", PortType::Str).input("confirmed", PortType::Bool).output("ok", PortType::Bool))
        .edge(("count", "table"), ("export", "table"))
        .edge(("export", "csv"), ("sign_off", "csv"))
        .edge(("annotate", "confirmed"), ("sign_off", "confirmed"));
    engine.define(&mut g, def).unwrap();
    let jl = BTreeMap::from([("jsonl".to_string(), Value::Str(jsonl.clone()))]);
    let report = engine.execute(&mut g, "review", jl.clone()).unwrap();
    assert_eq!(report.status, RunStatus::AwaitingHuman);
    assert_eq!(report.awaiting, ["annotate"]);
    assert_eq!(report.step("sign_off").unwrap().status, StepStatus::Pending);
    assert_eq!(report.step("export").unwrap().status, StepStatus::Ok);
    let run = report.run_id.clone();

    let err = engine
        .resolve_manual(&mut g, &run, "annotate", BTreeMap::from([("wind".into(), Value::Str("high".into()))]), "analyst_kim")
        .unwrap_err();
    assert!(matches!(err, WorkflowError::SchemaMismatch { .. }), "{err:?}");
    let err = engine
        .resolve_manual(
            &mut g,
            &run,
            "annotate",
            BTreeMap::from([("wind".into(), Value::Int(3)), ("confirmed".into(), Value::Bool(true))]),
            "analyst_kim",
        )
        .unwrap_err();
    assert!(matches!(err, WorkflowError::SchemaMismatch { .. }), "{err:?}");
    let err = engine.resolve_manual(&mut g, &run, "count", BTreeMap::new(), "analyst_kim").unwrap_err();
    assert_eq!(err, WorkflowError::NotAwaiting { run: run.clone(), step: "count".into() });
    assert!(matches!(
        engine.resolve_manual(&mut g, "nope", "annotate", BTreeMap::new(), "x"),
        Err(WorkflowError::UnknownRun(_))
    ));

    let answer = BTreeMap::from([("wind".into(), Value::Str("high".into())), ("confirmed".into(), Value::Bool(true))]);
    let report = engine.resolve_manual(&mut g, &run, "annotate", answer.clone(), "analyst_kim").unwrap();
    assert_eq!(report.status, RunStatus::AwaitingHuman);
    assert_eq!(report.awaiting, ["sign_off"]);
    let act = report.step("annotate").unwrap().activity.clone().unwrap();
    assert_eq!(g.associated_agents(&act).map(|a| a.as_str()).collect::<Vec<_>>(), ["analyst_kim"]);
    assert_eq!(report.step("annotate").unwrap().agent.as_deref(), Some("analyst_kim"));

    let report = engine
        .resolve_manual(&mut g, &run, "sign_off", BTreeMap::from([("ok".into(), Value::Bool(true))]), "coach_lee")
        .unwrap();
    assert_eq!(report.status, RunStatus::Ok);
    let err = engine.resolve_manual(&mut g, &run, "annotate", answer, "analyst_kim").unwrap_err();
    assert!(matches!(err, WorkflowError::NotAwaiting { .. }));

    // the same question with the same inputs is not asked twice
    let again = engine.execute(&mut g, "review", jl).unwrap();
    assert_eq!(again.status, RunStatus::Ok);
    assert!(again.recomputed.is_empty());
    assert!(g.validate().is_empty());
}

#[test]
fn failing_step_skips_its_dependents() {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    engine.define(&mut g, pipeline()).unwrap();
    let mut ins = inputs(&jsonl, &fixture("sensor.csv"));
    ins.insert("mapping".into(), Value::Mapping(make_map(["P3", "P7"], b"s").unwrap()));
    let report = engine.execute(&mut g, "goal_pct", ins).unwrap();
    assert_eq!(report.status, RunStatus::Error);
    let failures = report.failures();
    assert_eq!(failures.len(), 1);
    assert!(matches!(&failures[0], WorkflowError::StepFailed { step, cause } if step == "deid" && cause.contains("P12")));
    for s in ["goal_pct", "reid", "export"] {
        assert_eq!(report.step(s).unwrap().status, StepStatus::Skipped);
    }
    assert_eq!(report.step("per_kind").unwrap().status, StepStatus::Ok);
}

#[test]
fn missing_and_unknown_inputs() {
    let mut g = ProvGraph::new();
    let mut engine = Engine::new();
    engine.define(&mut g, pipeline()).unwrap();
    let err = engine
        .execute(&mut g, "goal_pct", BTreeMap::from([("jsonl".to_string(), Value::Str(String::new()))]))
        .unwrap_err();
    assert_eq!(err, WorkflowError::MissingInput("csv".into()));
    let err = engine.execute(&mut g, "goal_pct", BTreeMap::from([("bogus".to_string(), Value::Int(1))])).unwrap_err();
    assert_eq!(err, WorkflowError::UnknownInput("bogus".into()));
    let err = engine.execute(&mut g, "goal_pct", BTreeMap::from([("csv".to_string(), Value::Int(1))])).unwrap_err();
    assert!(matches!(err, WorkflowError::PortTypeMismatch { .. }));
    assert_eq!(engine.define(&mut g, pipeline()).unwrap_err(), WorkflowError::DuplicateWorkflow("goal_pct".into()));
    assert!(matches!(engine.recompute_dirty(&mut g, "other"), Err(WorkflowError::UnknownWorkflow(_))));
}

#[test]
fn versions_edit_rollback_and_diff() {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    // v1 stops at the de-identified metric
    let mut v1 = pipeline();
    v1.steps.retain(|s| s.step_id != "reid");
    v1.edges.retain(|e| e.from.step != "reid" && e.to.step != "reid");
    v1.edges.push(sportprov::workflow::Edge::new(("goal_pct", "metric"), ("export", "table")));
    engine.define(&mut g, v1.clone()).unwrap();
    engine.execute(&mut g, "goal_pct", inputs(&jsonl, &fixture("sensor.csv"))).unwrap();

    assert_eq!(engine.edit(&mut g, "goal_pct", pipeline()).unwrap(), 2);
    let d = engine.diff("goal_pct", 1, 2).unwrap();
    let shown: Vec<String> = d.ops.iter().map(ToString::to_string).collect();
    assert_eq!(
        shown,
        [
            "-edge goal_pct.metric -> export.table",
            "+step reid",
            "+edge goal_pct.metric -> reid.data",
            "+edge reid.data -> export.table"
        ]
    );
    let v2 = engine.definition_at("goal_pct", 2).unwrap().clone();
    assert_eq!(sportprov::workflow::apply_diff(engine.definition_at("goal_pct", 1).unwrap(), &d).unwrap(), v2);
    assert!(engine.diff("goal_pct", 2, 2).unwrap().ops.is_empty());

    // only the new step and what it feeds rerun
    let report = engine.recompute_dirty(&mut g, "goal_pct").unwrap();
    assert_eq!(report.recomputed, ["export", "reid"]);
    assert_eq!(pct_table(&engine, "goal_pct")["P7"], Some(75.0));

    let mut v3 = v2.clone();
    for s in &mut v3.steps {
        if s.step_id == "goal_pct" {
            *s = StepDef::automated("goal_pct", "compute_goal_pct");
        }
    }
    assert_eq!(engine.edit(&mut g, "goal_pct", v3).unwrap(), 3);
    let d = engine.diff("goal_pct", 2, 3).unwrap();
    assert_eq!(d.ops.len(), 1);
    assert!(d.ops[0].to_string().starts_with("~param goal_pct.exclude_high_wind"));

    assert_eq!(engine.rollback("goal_pct", 1).unwrap(), 1);
    assert_eq!(engine.rollback("goal_pct", 1).unwrap(), 1);
    let v4 = engine.edit(&mut g, "goal_pct", v1).unwrap();
    assert_eq!(v4, 4);
    let info = engine.versions("goal_pct").unwrap();
    assert_eq!(info.len(), 4);
    assert_eq!(info[0].children, [2, 4]);
    assert_eq!(info[2].parent, Some(2));
    assert_eq!(engine.rollback("goal_pct", 99).unwrap_err(), WorkflowError::UnknownVersion(99));
    assert_eq!(engine.diff("goal_pct", 1, 99).unwrap_err(), WorkflowError::UnknownVersion(99));

    // plans form a derivation chain that mirrors the tree
    assert!(g.out_edges("goal_pct.plan.v4").any(|e| e.dst.as_str() == "goal_pct.plan.v1"));
    assert!(g.validate().is_empty());
}

#[test]
fn outputs_trace_back_to_inputs_and_events() {
    let jsonl = fixture("game.jsonl");
    let mut g = game_graph(&jsonl);
    let mut engine = Engine::new();
    engine.define(&mut g, pipeline()).unwrap();
    engine.execute(&mut g, "goal_pct", inputs(&jsonl, &fixture("sensor.csv"))).unwrap();
    engine.apply_override(&mut g, "goal_pct", wind_override(true)).unwrap();
    let report = engine.recompute_dirty(&mut g, "goal_pct").unwrap();

    let reach = |from: &str| -> BTreeSet<String> {
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
    };
    let root_entities: BTreeMap<&str, String> = ["jsonl", "csv", "mapping"]
        .into_iter()
        .map(|r| (r, g.nodes().find(|n| n.attr("slot") == Some(r)).unwrap().id.to_string()))
        .collect();
    let def = engine.definition("goal_pct").unwrap();
    for s in &report.steps {
        // roots consumed by this step or anything upstream of it
        let mut upstream: BTreeSet<String> = BTreeSet::from([s.step_id.clone()]);
        loop {
            let before = upstream.len();
            for e in &def.edges {
                if upstream.contains(&e.to.step) {
                    upstream.insert(e.from.step.clone());
                }
            }
            if upstream.len() == before {
                break;
            }
        }
        let roots: BTreeSet<&str> = def
            .steps
            .iter()
            .filter(|d| upstream.contains(&d.step_id))
            .flat_map(|d| d.inputs.keys().filter(|p| def.feeder(&d.step_id, p).is_none()).map(String::as_str))
            .collect();
        for entity in s.outputs.values() {
            let r = reach(entity);
            assert!(r.contains(s.activity.as_deref().unwrap()), "{entity}");
            for root in &roots {
                assert!(r.contains(&root_entities[root]), "{entity} does not reach {root}");
            }
        }
    }
    // the wind override is part of the metric's history
    let metric = &report.step("reid").unwrap().outputs["data"];
    assert!(reach(metric).iter().any(|n| n.contains(".ov")));
    let clips = drill_down(&g, metric).unwrap();
    let events: BTreeSet<&str> = clips.iter().map(|c| c.event_id.as_str()).collect();
    assert!(events.contains("goal_1") && events.contains("behind_2"), "{events:?}");
}
