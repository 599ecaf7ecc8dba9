use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as JsonValue};

use super::builtins::{self, Inputs, Outputs};
use super::version::{diff_defs, VersionInfo, VersionTree, WorkflowDiff};
use super::{digest_json, PortType, StepDef, StepMode, Value, WorkflowDef, WorkflowError, ENGINE_SCHEMA_VERSION};
use crate::graph::{attr_key_error, EdgeKind, NodeId, NodeKind, ProvEdge, ProvGraph, ProvNode, Relation, TopLevel};
use crate::privacy::SECRET_ATTR;
use crate::table::{cell_text, Table};

/// Agent every automated step is associated with.
pub const ENGINE_AGENT: &str = "sportprov-engine";

const MEMO_CAPACITY: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    Error,
    AwaitingHuman,
    /// An upstream step failed.
    Skipped,
    /// Waiting on an upstream manual step.
    Pending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Error,
    AwaitingHuman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRun {
    pub run_id: String,
    pub step_id: String,
    pub status: StepStatus,
    /// Outputs were reused instead of computed in this run.
    pub cached: bool,
    pub input_digests: BTreeMap<String, String>,
    pub output_digests: BTreeMap<String, String>,
    pub cache_key: Option<String>,
    pub agent: Option<String>,
    pub activity: Option<String>,
    /// port -> entity id seen by consumers
    pub outputs: BTreeMap<String, String>,
    pub error: Option<String>,
    pub started_seq: Option<u64>,
    pub ended_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub workflow_id: String,
    pub version: u32,
    pub status: RunStatus,
    pub steps: Vec<StepRun>,
    pub recomputed: Vec<String>,
    pub cached: Vec<String>,
    pub awaiting: Vec<String>,
}

impl RunReport {
    pub fn step(&self, step_id: &str) -> Option<&StepRun> {
        self.steps.iter().find(|s| s.step_id == step_id)
    }

    pub fn failures(&self) -> Vec<WorkflowError> {
        self.steps
            .iter()
            .filter(|s| s.status == StepStatus::Error)
            .map(|s| WorkflowError::StepFailed { step: s.step_id.clone(), cause: s.error.clone().unwrap_or_default() })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Replacement {
    /// Use this value instead.
    Replace { value: Value },
    /// Upsert rows into a table, matching existing rows on the `key` columns.
    Patch { key: Vec<String>, rows: Vec<BTreeMap<String, JsonValue>> },
}

impl Replacement {
    fn apply(&self, base: &Value, ty: PortType) -> Result<Value, String> {
        match self {
            Replacement::Replace { value } if value.fits(ty) => Ok(value.clone()),
            Replacement::Replace { .. } => Err(format!("replacement is not a {ty} value")),
            Replacement::Patch { key, rows } => {
                let mut t = base.as_table().ok_or("only tables can be patched")?.clone();
                if key.is_empty() {
                    return Err("patch needs at least one key column".into());
                }
                let key_cols = key.iter().map(|k| t.require(k).map_err(|e| e.to_string())).collect::<Result<Vec<_>, _>>()?;
                for row in rows {
                    let want: Vec<String> = key
                        .iter()
                        .map(|k| row.get(k).map(cell_text).ok_or_else(|| format!("patch row lacks key column `{k}`")))
                        .collect::<Result<_, _>>()?;
                    let hit = t.rows.iter().position(|r| key_cols.iter().zip(&want).all(|(&c, w)| cell_text(&r[c]) == *w));
                    let idx = match hit {
                        Some(i) => i,
                        None => {
                            t.rows.push(vec![JsonValue::Null; t.columns.len()]);
                            t.rows.len() - 1
                        }
                    };
                    for (col, v) in row {
                        let c = t.ensure_column(col);
                        t.rows[idx][c] = v.clone();
                    }
                }
                Ok(Value::Table(t))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    /// Root input name, `step.port`, or the id of an entity the workflow
    /// produced for one of those.
    pub target: String,
    pub replacement: Replacement,
    pub reason: String,
    pub author: String,
    pub sticky: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideReceipt {
    pub override_id: String,
    pub slot: String,
    /// Entity now seen by consumers of the slot.
    pub revision: Option<String>,
    pub dirty_steps: Vec<String>,
}

#[derive(Debug, Clone)]
struct SlotVal {
    value: Arc<Value>,
    digest: String,
    entity: Option<NodeId>,
}

impl SlotVal {
    fn new(value: Value, entity: Option<NodeId>) -> Self {
        let digest = value.digest();
        SlotVal { value: Arc::new(value), digest, entity }
    }
}

/// What one evaluation of a step left behind.
#[derive(Debug, Clone)]
struct Produced {
    outputs: BTreeMap<String, SlotVal>,
    activity: NodeId,
    agent: NodeId,
}

#[derive(Debug)]
struct Memo {
    map: HashMap<String, Produced>,
    order: VecDeque<String>,
    capacity: usize,
}

impl Default for Memo {
    fn default() -> Self {
        Memo { map: HashMap::new(), order: VecDeque::new(), capacity: MEMO_CAPACITY }
    }
}

impl Memo {
    fn get(&self, key: &str, graph: &ProvGraph) -> Option<Produced> {
        let p = self.map.get(key)?;
        let present = graph.contains(p.activity.as_str())
            && p.outputs.values().all(|s| s.entity.as_ref().is_none_or(|e| graph.contains(e.as_str())));
        present.then(|| p.clone())
    }

    fn put(&mut self, key: String, p: Produced) {
        if self.map.insert(key.clone(), p).is_none() {
            self.order.push_back(key);
        }
        while self.order.len() > self.capacity {
            let old = self.order.pop_front().expect("non-empty");
            self.map.remove(&old);
        }
    }
}

#[derive(Debug, Clone)]
struct OverrideState {
    id: String,
    ov: Override,
    slot: String,
    base_digest: String,
    active: bool,
    activity: NodeId,
    /// entity the override was applied on -> revision entity
    revisions: BTreeMap<NodeId, NodeId>,
}

#[derive(Debug, Clone)]
struct RootSlot {
    val: SlotVal,
    revision: u32,
}

#[derive(Debug)]
struct WorkflowState {
    tree: VersionTree,
    plans: BTreeMap<u32, NodeId>,
    roots: BTreeMap<String, RootSlot>,
    overrides: Vec<OverrideState>,
    runs: Vec<String>,
    latest: Option<String>,
    pending: bool,
    /// load step -> (last output entity, event ids it covers)
    loads: BTreeMap<String, (NodeId, HashSet<String>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Execute,
    Recompute,
}

#[derive(Debug)]
struct PrevStep {
    ok: bool,
    key: Option<String>,
    produced: Option<Produced>,
}

#[derive(Debug)]
struct StepState {
    run: StepRun,
    inputs: BTreeMap<String, SlotVal>,
    produced: Option<Produced>,
    effective: BTreeMap<String, SlotVal>,
    dirty: bool,
}

#[derive(Debug)]
struct RunState {
    report: RunReport,
    def: WorkflowDef,
    mode: Mode,
    prev: BTreeMap<String, PrevStep>,
    roots: BTreeMap<String, SlotVal>,
    steps: BTreeMap<String, StepState>,
}

/// Workflow registry and scheduler. All provenance goes into the graph
/// passed to each call, which must be the same graph every time.
#[derive(Debug, Default)]
pub struct Engine {
    workflows: BTreeMap<String, WorkflowState>,
    runs: BTreeMap<String, RunState>,
    memo: Memo,
    override_count: usize,
}

fn node_id(s: &str) -> Result<NodeId, WorkflowError> {
    Ok(NodeId::new(s)?)
}

fn link(graph: &mut ProvGraph, src: &NodeId, dst: &NodeId, rel: Relation) -> Result<(), WorkflowError> {
    graph.add_edge(ProvEdge::new(src.clone(), dst.clone(), EdgeKind::data(rel)))?;
    Ok(())
}

fn entity_kind(ty: PortType) -> NodeKind {
    match ty {
        PortType::Metric => NodeKind::Metric,
        PortType::Events | PortType::Table | PortType::Mapping | PortType::Str | PortType::Json => NodeKind::Dataset,
        PortType::Int | PortType::Float | PortType::Bool => NodeKind::Entity,
    }
}

fn human_agent(graph: &mut ProvGraph, name: &str) -> Result<NodeId, WorkflowError> {
    let id = NodeId::sanitized(name);
    match graph.node(id.as_str()) {
        Some(n) if n.kind.top_level() == TopLevel::Agent => {}
        Some(_) => return Err(WorkflowError::InvalidDefinition(format!("`{id}` exists and is not an agent"))),
        None => {
            graph.add_node(ProvNode::new(id.clone(), NodeKind::Human, name))?;
        }
    }
    Ok(id)
}

fn cache_key(step: &StepDef, inputs: &BTreeMap<String, SlotVal>) -> String {
    let op = match &step.mode {
        StepMode::Automated { builtin, params } => json!({ "builtin": builtin, "params": params }),
        StepMode::Manual { prompt } => json!({ "manual": step.step_id, "prompt": prompt }),
    };
    let inputs: BTreeMap<&String, &String> = inputs.iter().map(|(k, v)| (k, &v.digest)).collect();
    digest_json(&json!({
        "schema": ENGINE_SCHEMA_VERSION,
        "op": op,
        "outputs": step.outputs,
        "inputs": inputs,
    }))
}

impl WorkflowState {
    fn def(&self) -> &WorkflowDef {
        self.tree.current()
    }

    /// Apply active overrides on `slot` to `base`, emitting revision
    /// entities the first time each override meets a given entity.
    fn effective(&mut self, graph: &mut ProvGraph, slot: &str, ty: PortType, base: SlotVal) -> Result<SlotVal, WorkflowError> {
        let mut cur = base.clone();
        for ov in self.overrides.iter_mut().filter(|o| o.slot == slot && o.active) {
            if !ov.ov.sticky && ov.base_digest != base.digest {
                ov.active = false;
                continue;
            }
            let Ok(value) = ov.ov.replacement.apply(&cur.value, ty) else {
                ov.active = false;
                continue;
            };
            let entity = match &cur.entity {
                None => None,
                Some(e) => Some(match ov.revisions.get(e) {
                    Some(r) => r.clone(),
                    None => {
                        let r = emit_revision(graph, ov, e, &value)?;
                        ov.revisions.insert(e.clone(), r.clone());
                        r
                    }
                }),
            };
            cur = SlotVal::new(value, entity);
        }
        Ok(cur)
    }
}

fn emit_revision(graph: &mut ProvGraph, ov: &OverrideState, base: &NodeId, value: &Value) -> Result<NodeId, WorkflowError> {
    let rid = node_id(&format!("{base}.{}", ov.id))?;
    if graph.contains(rid.as_str()) {
        return Ok(rid);
    }
    let base_node = graph.node(base.as_str()).ok_or_else(|| WorkflowError::UnknownEntity(base.to_string()))?;
    let mut node = ProvNode::new(rid.clone(), base_node.kind, format!("{} (overridden)", ov.slot))
        .with_attr("digest", value.digest())
        .with_attr("slot", ov.slot.clone())
        .with_attr("override", ov.id.clone())
        .with_attr("reason", ov.ov.reason.clone())
        .with_attr("sticky", ov.ov.sticky.to_string());
    if let Some(s) = base_node.attr(SECRET_ATTR) {
        node = node.with_attr(SECRET_ATTR, s.to_string());
    }
    if let Some(w) = base_node.attr("workflow") {
        node = node.with_attr("workflow", w.to_string());
    }
    graph.add_node(node)?;
    link(graph, &rid, base, Relation::WasDerivedFrom)?;
    link(graph, &ov.activity, base, Relation::Used)?;
    link(graph, &rid, &ov.activity, Relation::WasGeneratedBy)?;
    Ok(rid)
}

struct EmitCtx<'a> {
    run_id: &'a str,
    workflow: &'a str,
    version: u32,
    plan: &'a NodeId,
}

/// A step of the current wave, its result if it was computed, and its cache key.
type Ordered = (StepDef, Option<Result<Outputs, String>>, Next, String);

/// Record one step evaluation: the activity, what it used, and what it made.
#[allow(clippy::too_many_arguments)]
fn emit_step(
    graph: &mut ProvGraph,
    loads: &mut BTreeMap<String, (NodeId, HashSet<String>)>,
    ctx: &EmitCtx<'_>,
    step: &StepDef,
    inputs: &BTreeMap<String, SlotVal>,
    key: &str,
    outputs: Outputs,
    agent: &NodeId,
) -> Result<Produced, WorkflowError> {
    let act = node_id(&format!("{}.{}", ctx.run_id, step.step_id))?;
    let (kind, what) = match &step.mode {
        StepMode::Automated { builtin, params } if builtin == "join_mapping" && builtins::is_forward_join(params) => {
            (NodeKind::DeIdentify, builtin.clone())
        }
        StepMode::Automated { builtin, .. } => (NodeKind::Computation, builtin.clone()),
        StepMode::Manual { .. } => (NodeKind::Annotation, "manual".to_string()),
    };
    let mut node = ProvNode::new(act.clone(), kind, format!("{} ({what})", step.step_id))
        .with_attr("workflow", ctx.workflow)
        .with_attr("version", ctx.version.to_string())
        .with_attr("run", ctx.run_id)
        .with_attr("step", step.step_id.clone())
        .with_attr("cache_key", key);
    match &step.mode {
        StepMode::Automated { builtin, params } => {
            node = node.with_attr("builtin", builtin.clone()).with_attr("params", serde_json::to_string(params).expect("json"));
        }
        StepMode::Manual { prompt } => node = node.with_attr("prompt", prompt.clone()),
    }
    graph.add_node(node)?;
    graph.add_edge(ProvEdge::new(act.clone(), ctx.plan.clone(), EdgeKind::data(Relation::Used)).with_attr("role", "plan"))?;
    for (port, slot) in inputs {
        if let Some(e) = &slot.entity {
            graph.add_edge(ProvEdge::new(act.clone(), e.clone(), EdgeKind::data(Relation::Used)).with_attr("port", port.clone()))?;
        }
    }
    link(graph, &act, agent, Relation::WasAssociatedWith)?;

    let mut produced = BTreeMap::new();
    for (port, value) in outputs {
        let ty = step.outputs[&port];
        let eid = node_id(&format!("{act}.{port}"))?;
        let mut node = ProvNode::new(eid.clone(), entity_kind(ty), format!("{}.{port}", step.step_id))
            .with_attr("digest", value.digest())
            .with_attr("value_type", ty.name())
            .with_attr("port", port.clone())
            .with_attr("slot", format!("{}.{port}", step.step_id))
            .with_attr("workflow", ctx.workflow);
        if let Value::Table(t) = &value {
            node = node.with_attr("rows", t.len().to_string());
        }
        if ty == PortType::Mapping {
            node = node.with_attr(SECRET_ATTR, "true");
        }
        graph.add_node(node)?;
        if step.builtin() == Some("load_events") {
            derive_from_events(graph, loads, &step.step_id, &eid, &value)?;
        }
        if ty == PortType::Metric {
            if let Value::Table(t) = &value {
                emit_rows(graph, &act, &eid, &format!("{}.{}.{port}", ctx.workflow, step.step_id), t)?;
            }
        }
        link(graph, &eid, &act, Relation::WasGeneratedBy)?;
        produced.insert(port, SlotVal::new(value, Some(eid)));
    }
    Ok(Produced { outputs: produced, activity: act, agent: agent.clone() })
}

fn event_state<'g>(graph: &'g ProvGraph, id: &str) -> Option<&'g NodeId> {
    graph.node(id).filter(|n| n.kind.top_level() == TopLevel::Entity).map(|n| &n.id)
}

/// Link a loaded event table to the game states it describes, stating only
/// what is new since the previous load.
fn derive_from_events(
    graph: &mut ProvGraph,
    loads: &mut BTreeMap<String, (NodeId, HashSet<String>)>,
    step: &str,
    eid: &NodeId,
    value: &Value,
) -> Result<(), WorkflowError> {
    let Some(t) = value.as_table() else { return Ok(()) };
    let Some(col) = t.column("event_id") else { return Ok(()) };
    let ids: HashSet<String> = t.rows.iter().map(|r| cell_text(&r[col])).collect();
    let (fresh, prev): (Vec<&String>, Option<NodeId>) = match loads.get(step) {
        Some((prev, seen)) if ids.is_superset(seen) && graph.contains(prev.as_str()) => {
            (ids.iter().filter(|i| !seen.contains(*i)).collect(), Some(prev.clone()))
        }
        _ => (ids.iter().collect(), None),
    };
    let mut fresh: Vec<NodeId> = fresh.into_iter().filter_map(|i| event_state(graph, i).cloned()).collect();
    fresh.sort();
    if let Some(p) = &prev {
        link(graph, eid, p, Relation::WasDerivedFrom)?;
    }
    for s in &fresh {
        link(graph, eid, s, Relation::WasDerivedFrom)?;
    }
    loads.insert(step.to_string(), (eid.clone(), ids));
    Ok(())
}

/// One entity per metric row, derived from the events it counts. Rows are
/// named by content, so a row that did not change since an earlier run of
/// the same slot is linked again rather than emitted twice.
fn emit_rows(graph: &mut ProvGraph, act: &NodeId, table_entity: &NodeId, slot: &str, t: &Table) -> Result<(), WorkflowError> {
    let events = t.column("_events");
    for (i, row) in t.rows.iter().enumerate() {
        let digest = digest_json(&json!({ "columns": t.columns, "row": row }));
        let rid = node_id(&format!("{slot}.row.{}", &digest[..16]))?;
        if !graph.contains(rid.as_str()) {
            let mut node = ProvNode::new(rid.clone(), NodeKind::Metric, format!("row {i} of {slot}"));
            for (c, cell) in t.columns.iter().zip(row) {
                if c.starts_with('_') || attr_key_error(c, graph.namespaces()).is_some() {
                    continue;
                }
                node = node.with_attr(c.clone(), cell_text(cell));
            }
            graph.add_node(node)?;
            if let Some(JsonValue::Array(evs)) = events.map(|c| &row[c]) {
                let mut states: Vec<NodeId> = evs.iter().filter_map(|e| event_state(graph, &cell_text(e)).cloned()).collect();
                states.sort();
                states.dedup();
                for s in &states {
                    link(graph, &rid, s, Relation::WasDerivedFrom)?;
                }
            }
            link(graph, &rid, act, Relation::WasGeneratedBy)?;
        }
        if !graph.out_edges(table_entity.as_str()).any(|e| e.dst == rid) {
            link(graph, table_entity, &rid, Relation::WasDerivedFrom)?;
        }
    }
    Ok(())
}

fn check_outputs(step: &StepDef, outputs: &Outputs) -> Result<(), String> {
    for (port, ty) in &step.outputs {
        match outputs.get(port) {
            None => return Err(format!("missing output `{port}`")),
            Some(v) if !v.fits(*ty) => return Err(format!("output `{port}` is not a {ty} value")),
            Some(_) => {}
        }
    }
    match outputs.keys().find(|k| !step.outputs.contains_key(*k)) {
        Some(extra) => Err(format!("unexpected output `{extra}`")),
        None => Ok(()),
    }
}

enum Next {
    Reuse(Produced, bool),
    Compute,
    Await,
}

impl Engine {
    pub fn new() -> Self {
        Engine::default()
    }

    /// Engine that remembers at most `capacity` step results across runs.
    /// Zero turns reuse off, so every run computes every step.
    pub fn with_memo_capacity(capacity: usize) -> Self {
        Engine { memo: Memo { capacity, ..Memo::default() }, ..Engine::default() }
    }

    fn state(&self, wf: &str) -> Result<&WorkflowState, WorkflowError> {
        self.workflows.get(wf).ok_or_else(|| WorkflowError::UnknownWorkflow(wf.to_string()))
    }

    fn state_mut(&mut self, wf: &str) -> Result<&mut WorkflowState, WorkflowError> {
        self.workflows.get_mut(wf).ok_or_else(|| WorkflowError::UnknownWorkflow(wf.to_string()))
    }

    pub fn workflow_ids(&self) -> impl Iterator<Item = &str> {
        self.workflows.keys().map(String::as_str)
    }

    /// Register a workflow as version 1 and record its plan.
    pub fn define(&mut self, graph: &mut ProvGraph, def: WorkflowDef) -> Result<u32, WorkflowError> {
        let mut def = def.normalized()?;
        def.version = 1;
        if self.workflows.contains_key(&def.workflow_id) {
            return Err(WorkflowError::DuplicateWorkflow(def.workflow_id));
        }
        if !graph.contains(ENGINE_AGENT) {
            graph.add_node(ProvNode::new(node_id(ENGINE_AGENT)?, NodeKind::Agent, "workflow engine"))?;
        }
        let plan = emit_plan(graph, &def, None)?;
        self.workflows.insert(
            def.workflow_id.clone(),
            WorkflowState {
                tree: VersionTree::new(def),
                plans: BTreeMap::from([(1, plan)]),
                roots: BTreeMap::new(),
                overrides: Vec::new(),
                runs: Vec::new(),
                latest: None,
                pending: true,
                loads: BTreeMap::new(),
            },
        );
        Ok(1)
    }

    pub fn definition(&self, wf: &str) -> Result<&WorkflowDef, WorkflowError> {
        Ok(self.state(wf)?.def())
    }

    pub fn definition_at(&self, wf: &str, version: u32) -> Result<&WorkflowDef, WorkflowError> {
        self.state(wf)?.tree.get(version)
    }

    pub fn versions(&self, wf: &str) -> Result<Vec<VersionInfo>, WorkflowError> {
        Ok(self.state(wf)?.tree.info())
    }

    /// Store `def` as a new version below the current one and make it current.
    pub fn edit(&mut self, graph: &mut ProvGraph, wf: &str, def: WorkflowDef) -> Result<u32, WorkflowError> {
        let def = def.normalized()?;
        if def.workflow_id != wf {
            return Err(WorkflowError::InvalidDefinition(format!("definition is for `{}`, not `{wf}`", def.workflow_id)));
        }
        let state = self.state_mut(wf)?;
        let parent = state.plans[&state.tree.current_version()].clone();
        let v = state.tree.edit(def);
        let plan = emit_plan(graph, state.tree.current(), Some(&parent))?;
        state.plans.insert(v, plan);
        state.pending = true;
        Ok(v)
    }

    /// Make an earlier version current. Later versions stay in the tree.
    pub fn rollback(&mut self, wf: &str, version: u32) -> Result<u32, WorkflowError> {
        let state = self.state_mut(wf)?;
        if state.tree.current_version() != version {
            state.tree.rollback(version)?;
            state.pending = true;
        }
        Ok(version)
    }

    pub fn diff(&self, wf: &str, a: u32, b: u32) -> Result<WorkflowDiff, WorkflowError> {
        let state = self.state(wf)?;
        Ok(diff_defs(state.tree.get(a)?, state.tree.get(b)?))
    }

    /// Replace root input values. Unchanged values are left alone; changed
    /// ones get a new entity derived from the previous one.
    pub fn set_inputs(
        &mut self,
        graph: &mut ProvGraph,
        wf: &str,
        inputs: BTreeMap<String, Value>,
    ) -> Result<Vec<String>, WorkflowError> {
        let state = self.state_mut(wf)?;
        let roots = state.def().roots();
        for (name, v) in &inputs {
            let ty = roots.get(name).ok_or_else(|| WorkflowError::UnknownInput(name.clone()))?;
            if !v.fits(*ty) {
                return Err(WorkflowError::PortTypeMismatch {
                    at: format!("root input `{name}`"),
                    expected: ty.to_string(),
                    found: value_type(v).into(),
                });
            }
        }
        let mut changed = Vec::new();
        for (name, v) in inputs {
            let digest = v.digest();
            let prev = state.roots.get(&name);
            if prev.is_some_and(|p| p.val.digest == digest) {
                continue;
            }
            let revision = prev.map_or(1, |p| p.revision + 1);
            let ty = roots[&name];
            let eid = node_id(&format!("{wf}.in.{name}.{revision}"))?;
            let mut node = ProvNode::new(eid.clone(), entity_kind(ty), format!("input {name}"))
                .with_attr("digest", digest)
                .with_attr("value_type", ty.name())
                .with_attr("slot", name.clone())
                .with_attr("workflow", wf);
            if ty == PortType::Mapping {
                node = node.with_attr(SECRET_ATTR, "true");
            }
            graph.add_node(node)?;
            if let Some(p) = prev.and_then(|p| p.val.entity.clone()) {
                link(graph, &eid, &p, Relation::WasDerivedFrom)?;
            }
            state.roots.insert(name.clone(), RootSlot { val: SlotVal::new(v, Some(eid)), revision });
            state.pending = true;
            changed.push(name);
        }
        Ok(changed)
    }

    /// Run every step, reusing memoised results for identical inputs.
    pub fn execute(
        &mut self,
        graph: &mut ProvGraph,
        wf: &str,
        inputs: BTreeMap<String, Value>,
    ) -> Result<RunReport, WorkflowError> {
        self.set_inputs(graph, wf, inputs)?;
        self.start_run(graph, wf, Mode::Execute)
    }

    /// Rerun the steps affected by changes since the latest run; everything
    /// else is carried over from it.
    pub fn recompute_dirty(&mut self, graph: &mut ProvGraph, wf: &str) -> Result<RunReport, WorkflowError> {
        self.start_run(graph, wf, Mode::Recompute)
    }

    /// Steps a recompute would rerun, without running anything.
    pub fn dirty_steps(&self, wf: &str) -> Result<BTreeSet<String>, WorkflowError> {
        let state = self.state(wf)?;
        let def = state.def();
        let Some(prev) = state.latest.as_ref().and_then(|r| self.runs.get(r)) else {
            return Ok(def.steps.iter().map(|s| s.step_id.clone()).collect());
        };
        let mut seeds = BTreeSet::new();
        for s in &def.steps {
            let before = prev.steps.get(&s.step_id);
            let same_def = prev.def.get(&s.step_id) == Some(s);
            let same_wiring = s.inputs.keys().all(|p| def.feeder(&s.step_id, p) == prev.def.feeder(&s.step_id, p));
            if !before.is_some_and(|b| b.run.status == StepStatus::Ok) || !same_def || !same_wiring {
                seeds.insert(s.step_id.clone());
            }
        }
        for (name, ty) in def.roots() {
            let now = state.roots.get(&name).map(|r| predicted(&state.overrides, &name, Some(ty), &r.val));
            if prev.roots.get(&name).map(|v| v.digest.clone()) != now {
                seeds.extend(def.consumers(&name));
            }
        }
        let mut slots: BTreeSet<&str> = state.overrides.iter().map(|o| o.slot.as_str()).collect();
        slots.retain(|s| s.contains('.'));
        for slot in slots {
            let (step, port) = slot.split_once('.').expect("step slot");
            let seen = prev.steps.get(step).and_then(|s| s.effective.get(port)).map(|v| v.digest.clone());
            let base = prev.steps.get(step).and_then(|s| s.produced.as_ref()).and_then(|p| p.outputs.get(port));
            let now = base.map(|b| predicted(&state.overrides, slot, def.slot_type(slot), b));
            if seen.is_some() && now.is_some() && seen != now {
                seeds.extend(def.consumers(slot));
            }
        }
        Ok(def.downstream(seeds))
    }

    fn start_run(&mut self, graph: &mut ProvGraph, wf: &str, mode: Mode) -> Result<RunReport, WorkflowError> {
        let Engine { workflows, runs, memo, .. } = self;
        let state = workflows.get_mut(wf).ok_or_else(|| WorkflowError::UnknownWorkflow(wf.to_string()))?;
        let def = state.def().clone();
        let root_types = def.roots();
        if let Some(missing) = root_types.keys().find(|k| !state.roots.contains_key(*k)) {
            return Err(WorkflowError::MissingInput(missing.clone()));
        }
        let run_id = format!("{wf}.r{}", state.runs.len() + 1);
        let prev = match (mode, state.latest.as_ref().and_then(|r| runs.get(r))) {
            (Mode::Recompute, Some(p)) => p
                .steps
                .iter()
                .map(|(id, s)| {
                    let prev = PrevStep {
                        ok: s.run.status == StepStatus::Ok,
                        key: s.run.cache_key.clone(),
                        produced: s.produced.clone(),
                    };
                    (id.clone(), prev)
                })
                .collect(),
            _ => BTreeMap::new(),
        };
        let mut roots = BTreeMap::new();
        for (name, ty) in &root_types {
            let base = state.roots[name].val.clone();
            roots.insert(name.clone(), state.effective(graph, name, *ty, base)?);
        }
        let steps = def
            .steps
            .iter()
            .map(|s| {
                let run = StepRun {
                    run_id: run_id.clone(),
                    step_id: s.step_id.clone(),
                    status: StepStatus::Pending,
                    cached: false,
                    input_digests: BTreeMap::new(),
                    output_digests: BTreeMap::new(),
                    cache_key: None,
                    agent: None,
                    activity: None,
                    outputs: BTreeMap::new(),
                    error: None,
                    started_seq: None,
                    ended_seq: None,
                };
                let st = StepState { run, inputs: BTreeMap::new(), produced: None, effective: BTreeMap::new(), dirty: false };
                (s.step_id.clone(), st)
            })
            .collect();
        let mut run = RunState {
            report: RunReport {
                run_id: run_id.clone(),
                workflow_id: wf.to_string(),
                version: def.version,
                status: RunStatus::Ok,
                steps: Vec::new(),
                recomputed: Vec::new(),
                cached: Vec::new(),
                awaiting: Vec::new(),
            },
            def,
            mode,
            prev,
            roots,
            steps,
        };
        state.runs.push(run_id.clone());
        state.latest = Some(run_id.clone());
        state.pending = false;
        let result = evaluate(state, memo, graph, &mut run);
        finish(&mut run);
        let report = run.report.clone();
        runs.insert(run_id, run);
        self.prune(wf);
        result.map(|_| report)
    }

    /// Supply the outputs of a manual step and continue the run.
    pub fn resolve_manual(
        &mut self,
        graph: &mut ProvGraph,
        run_id: &str,
        step_id: &str,
        outputs: BTreeMap<String, Value>,
        agent: &str,
    ) -> Result<RunReport, WorkflowError> {
        let Engine { workflows, runs, memo, .. } = self;
        let run = runs.get_mut(run_id).ok_or_else(|| WorkflowError::UnknownRun(run_id.to_string()))?;
        let step = run.def.get(step_id).cloned().ok_or_else(|| WorkflowError::UnknownStep(step_id.to_string()))?;
        let st = &run.steps[step_id];
        if st.run.status != StepStatus::AwaitingHuman {
            return Err(WorkflowError::NotAwaiting { run: run_id.to_string(), step: step_id.to_string() });
        }
        check_outputs(&step, &outputs)
            .map_err(|reason| WorkflowError::SchemaMismatch { step: step_id.to_string(), reason })?;
        let state = workflows.get_mut(&run.report.workflow_id).expect("runs belong to known workflows");
        let agent = human_agent(graph, agent)?;
        let key = st.run.cache_key.clone().expect("awaiting steps have keys");
        let inputs = st.inputs.clone();
        let plan = state.plans[&run.def.version].clone();
        let ctx = EmitCtx { run_id, workflow: &run.report.workflow_id, version: run.def.version, plan: &plan };
        let start = graph.next_seq();
        let produced = emit_step(graph, &mut state.loads, &ctx, &step, &inputs, &key, outputs, &agent)?;
        memo.put(key, produced.clone());
        let st = run.steps.get_mut(step_id).expect("checked");
        st.dirty = true;
        settle(state, graph, &step, st, produced, false, start)?;
        let result = evaluate(state, memo, graph, run);
        finish(run);
        let report = run.report.clone();
        let wf = report.workflow_id.clone();
        self.prune(&wf);
        result.map(|_| report)
    }

    /// Replace a value the workflow consumes. Consumers see the override
    /// from the next run on; the receipt lists the steps that will rerun.
    pub fn apply_override(
        &mut self,
        graph: &mut ProvGraph,
        wf: &str,
        ov: Override,
    ) -> Result<OverrideReceipt, WorkflowError> {
        let Engine { workflows, runs, override_count, .. } = self;
        let state = workflows.get_mut(wf).ok_or_else(|| WorkflowError::UnknownWorkflow(wf.to_string()))?;
        let def = state.def().clone();
        let slot = if def.slot_type(&ov.target).is_some() {
            ov.target.clone()
        } else {
            graph
                .node(&ov.target)
                .filter(|n| n.attr("workflow") == Some(wf))
                .and_then(|n| n.attr("slot"))
                .filter(|s| def.slot_type(s).is_some())
                .map(str::to_string)
                .ok_or_else(|| WorkflowError::UnknownEntity(ov.target.clone()))?
        };
        let ty = def.slot_type(&slot).expect("checked");
        let latest = state.latest.as_ref().and_then(|r| runs.get(r));
        let base = match slot.split_once('.') {
            None => state.roots.get(&slot).map(|r| r.val.clone()),
            Some((step, port)) => latest
                .and_then(|r| r.steps.get(step))
                .and_then(|s| s.produced.as_ref())
                .and_then(|p| p.outputs.get(port))
                .cloned(),
        };
        let Some(base) = base.filter(|b| b.entity.is_some()) else {
            return Err(WorkflowError::UnknownEntity(ov.target.clone()));
        };
        ov.replacement
            .apply(&base.value, ty)
            .map_err(|reason| WorkflowError::SchemaMismatch { step: slot.clone(), reason })?;
        let before = state.effective(graph, &slot, ty, base.clone())?;

        *override_count += 1;
        let id = format!("ov{override_count}");
        let author = human_agent(graph, &ov.author)?;
        let act = node_id(&format!("{wf}.override.{override_count}"))?;
        graph.add_node(
            ProvNode::new(act.clone(), NodeKind::Annotation, format!("override {slot}"))
                .with_attr("workflow", wf)
                .with_attr("slot", slot.clone())
                .with_attr("reason", ov.reason.clone())
                .with_attr("sticky", ov.sticky.to_string()),
        )?;
        link(graph, &act, &author, Relation::WasAssociatedWith)?;
        state.overrides.push(OverrideState {
            id: id.clone(),
            ov,
            slot: slot.clone(),
            base_digest: base.digest.clone(),
            active: true,
            activity: act,
            revisions: BTreeMap::new(),
        });
        let after = state.effective(graph, &slot, ty, base)?;
        let dirty_steps = if after.digest == before.digest {
            Vec::new()
        } else {
            state.pending = true;
            def.downstream(def.consumers(&slot)).into_iter().collect()
        };
        Ok(OverrideReceipt { override_id: id, slot, revision: after.entity.map(String::from), dirty_steps })
    }

    /// Overrides still in effect, in the order they apply.
    pub fn active_overrides(&self, wf: &str) -> Result<Vec<Override>, WorkflowError> {
        Ok(self.state(wf)?.overrides.iter().filter(|o| o.active).map(|o| Override { target: o.slot.clone(), ..o.ov.clone() }).collect())
    }

    pub fn report(&self, run_id: &str) -> Result<&RunReport, WorkflowError> {
        self.runs.get(run_id).map(|r| &r.report).ok_or_else(|| WorkflowError::UnknownRun(run_id.to_string()))
    }

    pub fn latest_run(&self, wf: &str) -> Result<Option<&RunReport>, WorkflowError> {
        let state = self.state(wf)?;
        Ok(state.latest.as_ref().and_then(|r| self.runs.get(r)).map(|r| &r.report))
    }

    /// True when inputs, overrides or the definition changed since the
    /// latest run.
    pub fn is_dirty(&self, wf: &str) -> Result<bool, WorkflowError> {
        Ok(self.state(wf)?.pending)
    }

    /// Values consumers saw for each `step.port` of a run. Only the latest
    /// run of a workflow and runs awaiting input keep their values.
    pub fn outputs(&self, run_id: &str) -> Result<BTreeMap<String, Value>, WorkflowError> {
        let run = self.runs.get(run_id).ok_or_else(|| WorkflowError::UnknownRun(run_id.to_string()))?;
        Ok(run
            .steps
            .iter()
            .flat_map(|(step, s)| s.effective.iter().map(move |(port, v)| (format!("{step}.{port}"), (*v.value).clone())))
            .collect())
    }

    /// Current value of `slot` in the latest run.
    pub fn slot_value(&self, wf: &str, slot: &str) -> Result<Option<Value>, WorkflowError> {
        let state = self.state(wf)?;
        let Some(run) = state.latest.as_ref().and_then(|r| self.runs.get(r)) else { return Ok(None) };
        Ok(match slot.split_once('.') {
            None => run.roots.get(slot).map(|v| (*v.value).clone()),
            Some((step, port)) => run.steps.get(step).and_then(|s| s.effective.get(port)).map(|v| (*v.value).clone()),
        })
    }

    fn prune(&mut self, wf: &str) {
        let Some(state) = self.workflows.get(wf) else { return };
        for id in &state.runs {
            if Some(id) == state.latest.as_ref() {
                continue;
            }
            if let Some(run) = self.runs.get_mut(id) {
                if run.report.status == RunStatus::AwaitingHuman {
                    continue;
                }
                run.roots.clear();
                for s in run.steps.values_mut() {
                    s.inputs.clear();
                    s.produced = None;
                    s.effective.clear();
                }
            }
        }
    }
}

fn value_type(v: &Value) -> &'static str {
    match v {
        Value::Table(_) => "table",
        Value::Mapping(_) => "mapping",
        Value::Str(_) => "str",
        Value::Int(_) => "int",
        Value::Float(_) => "float",
        Value::Bool(_) => "bool",
        Value::Json(_) => "json",
    }
}

/// Digest `slot` would have after overrides, without emitting anything.
fn predicted(overrides: &[OverrideState], slot: &str, ty: Option<PortType>, base: &SlotVal) -> String {
    let Some(ty) = ty else { return base.digest.clone() };
    let mut cur = (*base.value).clone();
    let mut touched = false;
    for ov in overrides.iter().filter(|o| o.slot == slot && o.active) {
        if !ov.ov.sticky && ov.base_digest != base.digest {
            continue;
        }
        if let Ok(v) = ov.ov.replacement.apply(&cur, ty) {
            cur = v;
            touched = true;
        }
    }
    if touched { cur.digest() } else { base.digest.clone() }
}

fn emit_plan(graph: &mut ProvGraph, def: &WorkflowDef, parent: Option<&NodeId>) -> Result<NodeId, WorkflowError> {
    let id = node_id(&format!("{}.plan.v{}", def.workflow_id, def.version))?;
    graph.add_node(
        ProvNode::new(id.clone(), NodeKind::Entity, format!("{} v{}", def.workflow_id, def.version))
            .with_attr("workflow", def.workflow_id.clone())
            .with_attr("version", def.version.to_string())
            .with_attr("definition", serde_json::to_string(def).expect("json")),
    )?;
    if let Some(p) = parent {
        link(graph, &id, p, Relation::WasDerivedFrom)?;
    }
    Ok(id)
}

/// Record a finished step and work out what its consumers will see.
fn settle(
    state: &mut WorkflowState,
    graph: &mut ProvGraph,
    step: &StepDef,
    st: &mut StepState,
    produced: Produced,
    cached: bool,
    start: u64,
) -> Result<(), WorkflowError> {
    let mut effective = BTreeMap::new();
    for (port, base) in &produced.outputs {
        let slot = format!("{}.{port}", step.step_id);
        effective.insert(port.clone(), state.effective(graph, &slot, step.outputs[port], base.clone())?);
    }
    st.run.status = StepStatus::Ok;
    st.run.cached = cached;
    st.run.error = None;
    st.run.agent = Some(produced.agent.to_string());
    st.run.activity = Some(produced.activity.to_string());
    st.run.output_digests = effective.iter().map(|(p, v)| (p.clone(), v.digest.clone())).collect();
    st.run.outputs = effective.iter().filter_map(|(p, v)| Some((p.clone(), v.entity.as_ref()?.to_string()))).collect();
    st.run.started_seq = Some(start);
    st.run.ended_seq = Some(graph.next_seq());
    st.effective = effective;
    st.produced = Some(produced);
    Ok(())
}

fn evaluate(state: &mut WorkflowState, memo: &mut Memo, graph: &mut ProvGraph, run: &mut RunState) -> Result<(), WorkflowError> {
    let plan = state.plans[&run.def.version].clone();
    let engine = node_id(ENGINE_AGENT)?;
    for wave in run.def.waves() {
        let mut jobs: Vec<(StepDef, Inputs, String)> = Vec::new();
        let mut settled: Vec<(StepDef, Next, String, u64)> = Vec::new();
        for step_id in &wave {
            if run.steps[step_id].run.status != StepStatus::Pending {
                continue;
            }
            let step = run.def.get(step_id).expect("wave steps exist").clone();
            let mut inputs = BTreeMap::new();
            let mut blocked: Option<(StepStatus, String)> = None;
            let mut producer_dirty = false;
            for port in step.inputs.keys() {
                if let Some(e) = run.def.feeder(step_id, port) {
                    let p = &run.steps[&e.from.step];
                    match p.run.status {
                        StepStatus::Ok => {
                            inputs.insert(port.clone(), p.effective[&e.from.port].clone());
                            producer_dirty |= p.dirty;
                        }
                        StepStatus::Error | StepStatus::Skipped => {
                            blocked = Some((StepStatus::Skipped, format!("upstream step `{}` did not complete", e.from.step)));
                        }
                        StepStatus::AwaitingHuman | StepStatus::Pending => {
                            blocked.get_or_insert((StepStatus::Pending, String::new()));
                        }
                    }
                } else if let Some(v) = step.defaults.get(port) {
                    inputs.insert(port.clone(), SlotVal::new(v.clone(), None));
                } else {
                    let v = run.roots.get(port).ok_or_else(|| WorkflowError::MissingInput(port.clone()))?;
                    inputs.insert(port.clone(), v.clone());
                }
            }
            let st = run.steps.get_mut(step_id).expect("step state");
            if let Some((status, why)) = blocked {
                st.dirty = run.mode == Mode::Recompute && status == StepStatus::Skipped;
                st.run.status = status;
                st.run.error = (!why.is_empty()).then_some(why);
                continue;
            }
            let key = cache_key(&step, &inputs);
            st.run.input_digests = inputs.iter().map(|(k, v)| (k.clone(), v.digest.clone())).collect();
            st.run.cache_key = Some(key.clone());
            st.inputs = inputs;
            let manual = step.builtin().is_none();
            let next = match run.mode {
                Mode::Recompute => {
                    let prev = run.prev.get(step_id);
                    let dirty = producer_dirty || !prev.is_some_and(|p| p.ok && p.key.as_deref() == Some(key.as_str()));
                    st.dirty = dirty;
                    match (dirty, prev.and_then(|p| p.produced.clone())) {
                        (false, Some(p)) => Next::Reuse(p, true),
                        (false, None) if manual => Next::Await,
                        (false, None) => Next::Compute,
                        (true, _) if manual => memo.get(&key, graph).map_or(Next::Await, |p| Next::Reuse(p, true)),
                        (true, _) => Next::Compute,
                    }
                }
                Mode::Execute => match memo.get(&key, graph) {
                    Some(p) => Next::Reuse(p, true),
                    None if manual => Next::Await,
                    None => Next::Compute,
                },
            };
            if matches!(next, Next::Compute) && !manual {
                let inputs = st.inputs.iter().map(|(k, v)| (k.clone(), v.value.clone())).collect();
                jobs.push((step, inputs, key));
            } else {
                settled.push((step, next, key, graph.next_seq()));
            }
        }

        let results: Vec<Result<Outputs, String>> = jobs
            .par_iter()
            .map(|(step, inputs, _)| {
                let StepMode::Automated { builtin, params } = &step.mode else { unreachable!("manual steps are not jobs") };
                let b = builtins::lookup(builtin).expect("normalized definitions name known builtins");
                let out = (b.run)(params, inputs)?;
                check_outputs(step, &out)?;
                Ok(out)
            })
            .collect();

        let mut order: Vec<Ordered> = settled
            .into_iter()
            .map(|(s, n, k, _)| (s, None, n, k))
            .chain(jobs.into_iter().zip(results).map(|((s, _, k), r)| (s, Some(r), Next::Compute, k)))
            .collect();
        order.sort_by(|a, b| a.0.step_id.cmp(&b.0.step_id));
        for (step, result, next, key) in order {
            let start = graph.next_seq();
            let st = run.steps.get_mut(&step.step_id).expect("step state");
            match (result, next) {
                (Some(Ok(out)), _) => {
                    let ctx = EmitCtx { run_id: &run.report.run_id, workflow: &run.report.workflow_id, version: run.def.version, plan: &plan };
                    let produced = emit_step(graph, &mut state.loads, &ctx, &step, &st.inputs, &key, out, &engine)?;
                    memo.put(key, produced.clone());
                    settle(state, graph, &step, st, produced, false, start)?;
                }
                (Some(Err(cause)), _) => {
                    st.run.status = StepStatus::Error;
                    st.run.error = Some(cause);
                    st.run.started_seq = Some(start);
                    st.run.ended_seq = Some(start);
                }
                (None, Next::Reuse(p, cached)) => settle(state, graph, &step, st, p, cached, start)?,
                (None, Next::Await) => {
                    st.run.status = StepStatus::AwaitingHuman;
                    st.run.started_seq = Some(start);
                }
                (None, Next::Compute) => unreachable!("computed steps carry a result"),
            }
        }
    }
    Ok(())
}

fn finish(run: &mut RunState) {
    let r = &mut run.report;
    r.steps = run.steps.values().map(|s| s.run.clone()).collect();
    r.awaiting = run.steps.values().filter(|s| s.run.status == StepStatus::AwaitingHuman).map(|s| s.run.step_id.clone()).collect();
    r.cached = run.steps.values().filter(|s| s.run.status == StepStatus::Ok && s.run.cached && !s.dirty).map(|s| s.run.step_id.clone()).collect();
    r.recomputed = run
        .steps
        .values()
        .filter(|s| match run.mode {
            Mode::Recompute => s.dirty,
            Mode::Execute => matches!(s.run.status, StepStatus::Ok | StepStatus::Error) && !s.run.cached,
        })
        .map(|s| s.run.step_id.clone())
        .collect();
    r.status = if run.steps.values().any(|s| matches!(s.run.status, StepStatus::Error | StepStatus::Skipped)) {
        RunStatus::Error
    } else if run.steps.values().any(|s| matches!(s.run.status, StepStatus::AwaitingHuman | StepStatus::Pending)) {
        RunStatus::AwaitingHuman
    } else {
        RunStatus::Ok
    };
}
