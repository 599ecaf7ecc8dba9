use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Edge, StepDef, StepMode, WorkflowDef, WorkflowError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum DiffOp {
    RemoveEdge { edge: Edge },
    RemoveStep { step_id: String },
    AddStep { step: StepDef },
    /// Anything other than parameters changed; carries the new definition.
    ChangeStep { step: StepDef },
    ChangeParam { step_id: String, key: String, from: Option<serde_json::Value>, to: Option<serde_json::Value> },
    AddEdge { edge: Edge },
}

impl fmt::Display for DiffOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: &Option<serde_json::Value>| v.as_ref().map_or("-".to_string(), |v| v.to_string());
        match self {
            DiffOp::RemoveEdge { edge } => write!(f, "-edge {edge}"),
            DiffOp::RemoveStep { step_id } => write!(f, "-step {step_id}"),
            DiffOp::AddStep { step } => write!(f, "+step {}", step.step_id),
            DiffOp::ChangeStep { step } => write!(f, "~step {}", step.step_id),
            DiffOp::ChangeParam { step_id, key, from, to } => {
                write!(f, "~param {step_id}.{key}: {} -> {}", show(from), show(to))
            }
            DiffOp::AddEdge { edge } => write!(f, "+edge {edge}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDiff {
    pub from: u32,
    pub to: u32,
    pub ops: Vec<DiffOp>,
}

/// Differences that take `a` to `b`, with parameter changes reported per key.
pub fn diff_defs(a: &WorkflowDef, b: &WorkflowDef) -> WorkflowDiff {
    let sa: BTreeMap<&str, &StepDef> = a.steps.iter().map(|s| (s.step_id.as_str(), s)).collect();
    let sb: BTreeMap<&str, &StepDef> = b.steps.iter().map(|s| (s.step_id.as_str(), s)).collect();
    let ea: BTreeSet<&Edge> = a.edges.iter().collect();
    let eb: BTreeSet<&Edge> = b.edges.iter().collect();
    let mut ops = Vec::new();
    ops.extend(ea.difference(&eb).map(|e| DiffOp::RemoveEdge { edge: (*e).clone() }));
    ops.extend(sa.keys().filter(|k| !sb.contains_key(*k)).map(|k| DiffOp::RemoveStep { step_id: k.to_string() }));
    ops.extend(sb.iter().filter(|(k, _)| !sa.contains_key(*k)).map(|(_, s)| DiffOp::AddStep { step: (*s).clone() }));
    for (id, old) in &sa {
        let Some(new) = sb.get(id) else { continue };
        if old == new {
            continue;
        }
        match (&old.mode, &new.mode) {
            (StepMode::Automated { builtin: b1, params: p1 }, StepMode::Automated { builtin: b2, params: p2 })
                if b1 == b2 && old.inputs == new.inputs && old.outputs == new.outputs && old.defaults == new.defaults =>
            {
                let keys: BTreeSet<&String> = p1.keys().chain(p2.keys()).collect();
                for key in keys {
                    if p1.get(key) != p2.get(key) {
                        ops.push(DiffOp::ChangeParam {
                            step_id: id.to_string(),
                            key: key.clone(),
                            from: p1.get(key).cloned(),
                            to: p2.get(key).cloned(),
                        });
                    }
                }
            }
            _ => ops.push(DiffOp::ChangeStep { step: (*new).clone() }),
        }
    }
    ops.extend(eb.difference(&ea).map(|e| DiffOp::AddEdge { edge: (*e).clone() }));
    WorkflowDiff { from: a.version, to: b.version, ops }
}

fn bad(op: &DiffOp) -> WorkflowError {
    WorkflowError::InvalidDefinition(format!("diff does not apply: {op}"))
}

/// Replay `diff` on `def`; the result carries the diff's target version.
pub fn apply_diff(def: &WorkflowDef, diff: &WorkflowDiff) -> Result<WorkflowDef, WorkflowError> {
    let mut out = def.clone();
    for op in &diff.ops {
        match op {
            DiffOp::RemoveEdge { edge } => {
                let before = out.edges.len();
                out.edges.retain(|e| e != edge);
                if out.edges.len() == before {
                    return Err(bad(op));
                }
            }
            DiffOp::RemoveStep { step_id } => {
                let before = out.steps.len();
                out.steps.retain(|s| &s.step_id != step_id);
                if out.steps.len() == before {
                    return Err(bad(op));
                }
            }
            DiffOp::AddStep { step } => {
                if out.get(&step.step_id).is_some() {
                    return Err(bad(op));
                }
                out.steps.push(step.clone());
            }
            DiffOp::ChangeStep { step } => {
                let slot = out.steps.iter_mut().find(|s| s.step_id == step.step_id).ok_or_else(|| bad(op))?;
                *slot = step.clone();
            }
            DiffOp::ChangeParam { step_id, key, from, to } => {
                let s = out.steps.iter_mut().find(|s| &s.step_id == step_id).ok_or_else(|| bad(op))?;
                let StepMode::Automated { params, .. } = &mut s.mode else { return Err(bad(op)) };
                if params.get(key) != from.as_ref() {
                    return Err(bad(op));
                }
                match to {
                    Some(v) => params.insert(key.clone(), v.clone()),
                    None => params.remove(key),
                };
            }
            DiffOp::AddEdge { edge } => {
                if out.edges.contains(edge) {
                    return Err(bad(op));
                }
                out.edges.push(edge.clone());
            }
        }
    }
    out.version = diff.to;
    out.normalized()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionInfo {
    pub version: u32,
    pub parent: Option<u32>,
    pub children: Vec<u32>,
    pub current: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct VersionTree {
    defs: BTreeMap<u32, (WorkflowDef, Option<u32>)>,
    current: u32,
}

impl VersionTree {
    pub fn new(def: WorkflowDef) -> Self {
        VersionTree { defs: BTreeMap::from([(def.version, (def, None))]), current: 1 }
    }

    pub fn current(&self) -> &WorkflowDef {
        &self.defs[&self.current].0
    }

    pub fn current_version(&self) -> u32 {
        self.current
    }

    pub fn get(&self, v: u32) -> Result<&WorkflowDef, WorkflowError> {
        self.defs.get(&v).map(|(d, _)| d).ok_or(WorkflowError::UnknownVersion(v))
    }

    /// Add `def` as a child of the current version and make it current.
    pub fn edit(&mut self, mut def: WorkflowDef) -> u32 {
        let v = self.defs.keys().max().copied().unwrap_or(0) + 1;
        def.version = v;
        self.defs.insert(v, (def, Some(self.current)));
        self.current = v;
        v
    }

    pub fn rollback(&mut self, v: u32) -> Result<u32, WorkflowError> {
        self.get(v)?;
        self.current = v;
        Ok(v)
    }

    pub fn info(&self) -> Vec<VersionInfo> {
        self.defs
            .iter()
            .map(|(v, (_, parent))| VersionInfo {
                version: *v,
                parent: *parent,
                children: self.defs.iter().filter(|(_, (_, p))| *p == Some(*v)).map(|(c, _)| *c).collect(),
                current: *v == self.current,
            })
            .collect()
    }
}
