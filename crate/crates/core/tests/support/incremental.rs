//! Incremental recomputation checked against clean full runs.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use sportprov::game::write_events_jsonl;
use sportprov::graph::ProvGraph;
use sportprov::testkit::{random_mutation, random_pipeline, Mutation, PipelineCase};
use sportprov::workflow::{Engine, RunReport, StepMode, StepStatus, Value, WorkflowDef, WorkflowError};

const WF: &str = "case";

#[derive(Debug, Default, Clone, Copy)]
pub struct Stats {
    pub recomputes: usize,
    pub steps_rerun: usize,
    pub steps_total: usize,
    /// recomputes that reran some but not all steps
    pub partial: usize,
}

/// Steps that must rerun after moving from (`old_def`, `old`) to `def`,
/// where `full` is a clean run of the new state. A step reruns when it is
/// new, changed, failed before, or one of its inputs changed: a root or
/// default value with a different digest, a rewired port, or a producer that
/// reruns or whose output as seen by consumers changed.
pub fn dirty_closure(old_def: &WorkflowDef, old: &RunReport, def: &WorkflowDef, full: &RunReport) -> BTreeSet<String> {
    let mut dirty = BTreeSet::new();
    for wave in def.waves() {
        for s in wave {
            let step = def.get(&s).unwrap();
            let before = old.step(&s);
            let now = full.step(&s).unwrap();
            let mut d = before.is_none_or(|b| b.status != StepStatus::Ok) || old_def.get(&s) != Some(step);
            for port in step.inputs.keys() {
                let feeder = def.feeder(&s, port);
                if feeder != old_def.feeder(&s, port) {
                    d = true;
                    continue;
                }
                match feeder {
                    Some(e) => {
                        let q = &e.from.step;
                        let seen_now = full.step(q).and_then(|r| r.output_digests.get(&e.from.port));
                        let seen_then = old.step(q).and_then(|r| r.output_digests.get(&e.from.port));
                        d |= dirty.contains(q) || seen_now != seen_then;
                    }
                    None => d |= now.input_digests.get(port) != before.and_then(|b| b.input_digests.get(port)),
                }
            }
            if d {
                dirty.insert(s);
            }
        }
    }
    dirty
}

/// Apply `m` to `engine`; returns the inputs the next run should see.
fn apply(engine: &mut Engine, g: &mut ProvGraph, case: &PipelineCase, def: &WorkflowDef, inputs: &mut BTreeMap<String, Value>, m: &Mutation) -> Result<(), String> {
    let err = |e: WorkflowError| format!("{m:?}: {e}");
    match m {
        Mutation::Events(n) => {
            let v = Value::Str(write_events_jsonl(&case.stream[..*n]));
            inputs.insert("jsonl".into(), v.clone());
            engine.set_inputs(g, WF, BTreeMap::from([("jsonl".to_string(), v)])).map_err(err)?;
        }
        Mutation::Sensor(csv) => {
            let v = Value::Str(csv.clone());
            inputs.insert("csv".into(), v.clone());
            engine.set_inputs(g, WF, BTreeMap::from([("csv".to_string(), v)])).map_err(err)?;
        }
        Mutation::Override(ov) => match engine.apply_override(g, WF, ov.clone()) {
            Ok(_) | Err(WorkflowError::SchemaMismatch { .. } | WorkflowError::UnknownEntity(_)) => {}
            Err(e) => return Err(err(e)),
        },
        Mutation::EditParam { step, key, value } => {
            let mut next = def.clone();
            for s in &mut next.steps {
                if &s.step_id == step {
                    if let StepMode::Automated { params, .. } = &mut s.mode {
                        params.insert(key.clone(), value.clone());
                    }
                }
            }
            engine.edit(g, WF, next).map_err(err)?;
        }
        Mutation::Noop => {
            let same = inputs["jsonl"].clone();
            let changed = engine.set_inputs(g, WF, BTreeMap::from([("jsonl".to_string(), same)])).map_err(err)?;
            if !changed.is_empty() {
                return Err("unchanged input reported as changed".into());
            }
        }
    }
    Ok(())
}

/// Run one random pipeline through `mutations` random changes, recomputing
/// after each and comparing with a clean run.
pub fn check_case<R: Rng>(rng: &mut R, mutations: usize) -> Result<Stats, String> {
    let err = |e: WorkflowError| e.to_string();
    let case = random_pipeline(rng);
    let mut g = ProvGraph::new();
    let mut engine = Engine::new();
    engine.define(&mut g, case.def.clone()).map_err(err)?;
    // same history, but every run computes every step from scratch
    let mut sg = ProvGraph::new();
    let mut shadow = Engine::with_memo_capacity(0);
    shadow.define(&mut sg, case.def.clone()).map_err(err)?;
    let mut inputs = case.inputs.clone();
    let mut def = case.def.clone();
    let mut prev = engine.execute(&mut g, WF, inputs.clone()).map_err(err)?;
    shadow.execute(&mut sg, WF, inputs.clone()).map_err(err)?;
    let mut prev_def = def.clone();
    let mut stats = Stats::default();
    let mut history = Vec::new();
    for _ in 0..mutations {
        let m = random_mutation(rng, &case, &def);
        history.push(format!("{m:?}"));
        let mut shadow_inputs = inputs.clone();
        apply(&mut engine, &mut g, &case, &def, &mut inputs, &m)?;
        apply(&mut shadow, &mut sg, &case, &def, &mut shadow_inputs, &m)?;
        def = engine.definition(WF).map_err(err)?.clone();
        let predicted = engine.dirty_steps(WF).map_err(err)?;
        let report = engine.recompute_dirty(&mut g, WF).map_err(err)?;
        let full = shadow.execute(&mut sg, WF, inputs.clone()).map_err(err)?;
        if !full.cached.is_empty() {
            return Err(format!("shadow reused {:?}", full.cached));
        }

        let got = engine.outputs(&report.run_id).map_err(err)?;
        let want = shadow.outputs(&full.run_id).map_err(err)?;
        if got != want {
            let diff: BTreeSet<&String> = got.keys().chain(want.keys()).filter(|k| got.get(*k) != want.get(*k)).collect();
            return Err(format!("after {history:?}: outputs differ at {diff:?}"));
        }
        for s in &report.steps {
            let f = full.step(&s.step_id).unwrap();
            if s.status != f.status || s.output_digests != f.output_digests {
                return Err(format!("after {m:?}: step {} is {:?}, clean run {:?}", s.step_id, s.status, f.status));
            }
        }
        let expected = dirty_closure(&prev_def, &prev, &def, &full);
        let rerun: BTreeSet<String> = report.recomputed.iter().cloned().collect();
        if rerun != expected {
            return Err(format!("after {m:?}: reran {rerun:?}, dirty closure {expected:?}"));
        }
        if predicted != expected {
            return Err(format!("after {m:?}: predicted {predicted:?}, dirty closure {expected:?}"));
        }
        stats.recomputes += 1;
        stats.steps_rerun += rerun.len();
        stats.steps_total += def.steps.len();
        if !rerun.is_empty() && rerun.len() < def.steps.len() {
            stats.partial += 1;
        }
        prev = report;
        prev_def = def.clone();
    }
    Ok(stats)
}
