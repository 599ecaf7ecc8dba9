//! Analysis pipelines mixing automated and manual steps.

mod builtins;
mod engine;
mod version;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::GraphError;
use crate::privacy::RedactionMap;
use crate::table::Table;

pub use builtins::{builtin_names, PortSpec};
pub use engine::{
    Engine, Override, OverrideReceipt, Replacement, RunReport, RunStatus, StepRun, StepStatus, ENGINE_AGENT,
};
pub use version::{apply_diff, diff_defs, DiffOp, VersionInfo, WorkflowDiff};

/// Bumped whenever builtin semantics change; part of every cache key.
pub const ENGINE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkflowError {
    #[error("unknown workflow `{0}`")]
    UnknownWorkflow(String),
    #[error("workflow `{0}` already exists")]
    DuplicateWorkflow(String),
    #[error("workflow has a cycle through {0:?}")]
    CyclicWorkflow(Vec<String>),
    #[error("port type mismatch at {at}: expected {expected}, found {found}")]
    PortTypeMismatch { at: String, expected: String, found: String },
    #[error("unknown builtin `{0}`")]
    UnknownBuiltin(String),
    #[error("invalid workflow: {0}")]
    InvalidDefinition(String),
    #[error("missing root input `{0}`")]
    MissingInput(String),
    #[error("`{0}` is not a root input")]
    UnknownInput(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("unknown step `{0}`")]
    UnknownStep(String),
    #[error("step `{step}` of run `{run}` is not awaiting input")]
    NotAwaiting { run: String, step: String },
    #[error("step `{step}`: {reason}")]
    SchemaMismatch { step: String, reason: String },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown version {0}")]
    UnknownVersion(u32),
    #[error("step `{step}` failed: {cause}")]
    StepFailed { step: String, cause: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortType {
    Events,
    Table,
    Metric,
    Mapping,
    Str,
    Int,
    Float,
    Bool,
    Json,
}

impl PortType {
    pub fn name(self) -> &'static str {
        match self {
            PortType::Events => "events",
            PortType::Table => "table",
            PortType::Metric => "metric",
            PortType::Mapping => "mapping",
            PortType::Str => "str",
            PortType::Int => "int",
            PortType::Float => "float",
            PortType::Bool => "bool",
            PortType::Json => "json",
        }
    }

    pub fn is_tabular(self) -> bool {
        matches!(self, PortType::Events | PortType::Table | PortType::Metric)
    }
}

impl fmt::Display for PortType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Value {
    Table(Table),
    Mapping(RedactionMap),
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    Json(serde_json::Value),
}

impl Value {
    pub fn fits(&self, ty: PortType) -> bool {
        match self {
            Value::Table(_) => ty.is_tabular(),
            Value::Mapping(_) => ty == PortType::Mapping,
            Value::Str(_) => ty == PortType::Str,
            Value::Int(_) => ty == PortType::Int,
            Value::Float(_) => ty == PortType::Float,
            Value::Bool(_) => ty == PortType::Bool,
            Value::Json(_) => ty == PortType::Json,
        }
    }

    pub fn as_table(&self) -> Option<&Table> {
        match self {
            Value::Table(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_json(&serde_json::to_value(self).expect("values serialize"))
    }

    /// Parse a textual value for a port: CSV for tables, JSON Lines for
    /// events, JSON for maps and `json`.
    pub fn from_text(ty: PortType, text: &str) -> Result<Value, String> {
        Ok(match ty {
            PortType::Events => Value::Table(Table::from_events(
                &crate::game::read_events_jsonl(text).map_err(|e| e.to_string())?,
            )),
            PortType::Table | PortType::Metric => Value::Table(Table::from_csv(text).map_err(|e| e.to_string())?),
            PortType::Mapping => Value::Mapping(serde_json::from_str(text).map_err(|e| e.to_string())?),
            PortType::Str => Value::Str(text.to_string()),
            PortType::Int => Value::Int(text.trim().parse().map_err(|e| format!("{e}"))?),
            PortType::Float => Value::Float(text.trim().parse().map_err(|e| format!("{e}"))?),
            PortType::Bool => Value::Bool(text.trim().parse().map_err(|e| format!("{e}"))?),
            PortType::Json => Value::Json(serde_json::from_str(text).map_err(|e| e.to_string())?),
        })
    }
}

pub(crate) fn digest_json(v: &serde_json::Value) -> String {
    // serde_json maps are sorted, so this is canonical
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json serializes")))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PortRef {
    pub step: String,
    pub port: String,
}

impl PortRef {
    pub fn new(step: impl Into<String>, port: impl Into<String>) -> Self {
        PortRef { step: step.into(), port: port.into() }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.step, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: PortRef,
    pub to: PortRef,
}

impl Edge {
    pub fn new(from: (&str, &str), to: (&str, &str)) -> Self {
        Edge { from: PortRef::new(from.0, from.1), to: PortRef::new(to.0, to.1) }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.from, self.to)
    }
}

pub type Params = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StepMode {
    Automated {
        builtin: String,
        #[serde(default)]
        params: Params,
    },
    Manual {
        prompt: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDef {
    pub step_id: String,
    #[serde(flatten)]
    pub mode: StepMode,
    /// Filled in from the builtin's signature when left empty.
    #[serde(default)]
    pub inputs: BTreeMap<String, PortType>,
    #[serde(default)]
    pub outputs: BTreeMap<String, PortType>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub defaults: BTreeMap<String, Value>,
}

impl StepDef {
    pub fn automated(step_id: &str, builtin: &str) -> Self {
        StepDef {
            step_id: step_id.to_string(),
            mode: StepMode::Automated { builtin: builtin.to_string(), params: Params::new() },
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            defaults: BTreeMap::new(),
        }
    }

    pub fn manual(step_id: &str, prompt: &str) -> Self {
        StepDef {
            step_id: step_id.to_string(),
            mode: StepMode::Manual { prompt: prompt.to_string() },
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            defaults: BTreeMap::new(),
        }
    }

    pub fn param(mut self, key: &str, value: serde_json::Value) -> Self {
        if let StepMode::Automated { params, .. } = &mut self.mode {
            params.insert(key.to_string(), value);
        }
        self
    }

    pub fn input(mut self, port: &str, ty: PortType) -> Self {
        self.inputs.insert(port.to_string(), ty);
        self
    }

    pub fn output(mut self, port: &str, ty: PortType) -> Self {
        self.outputs.insert(port.to_string(), ty);
        self
    }

    pub fn default_value(mut self, port: &str, value: Value) -> Self {
        self.defaults.insert(port.to_string(), value);
        self
    }

    pub fn builtin(&self) -> Option<&str> {
        match &self.mode {
            StepMode::Automated { builtin, .. } => Some(builtin),
            StepMode::Manual { .. } => None,
        }
    }

    pub fn params(&self) -> Option<&Params> {
        match &self.mode {
            StepMode::Automated { params, .. } => Some(params),
            StepMode::Manual { .. } => None,
        }
    }
}

fn default_version() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDef {
    pub workflow_id: String,
    #[serde(default = "default_version")]
    pub version: u32,
    pub steps: Vec<StepDef>,
    #[serde(default)]
    pub edges: Vec<Edge>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl WorkflowDef {
    pub fn new(workflow_id: &str) -> Self {
        WorkflowDef { workflow_id: workflow_id.to_string(), version: 1, steps: Vec::new(), edges: Vec::new() }
    }

    pub fn step(mut self, step: StepDef) -> Self {
        self.steps.push(step);
        self
    }

    pub fn edge(mut self, from: (&str, &str), to: (&str, &str)) -> Self {
        self.edges.push(Edge::new(from, to));
        self
    }

    pub fn get(&self, step_id: &str) -> Option<&StepDef> {
        self.steps.iter().find(|s| s.step_id == step_id)
    }

    /// Edge feeding `step.port`, if any.
    pub fn feeder(&self, step: &str, port: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.to.step == step && e.to.port == port)
    }

    /// Unconnected, undefaulted input ports, grouped by port name.
    pub fn roots(&self) -> BTreeMap<String, PortType> {
        let mut roots = BTreeMap::new();
        for s in &self.steps {
            for (port, ty) in &s.inputs {
                if self.feeder(&s.step_id, port).is_none() && !s.defaults.contains_key(port) {
                    roots.insert(port.clone(), *ty);
                }
            }
        }
        roots
    }

    /// Type of an override target: a root input name or `step.port` output.
    pub fn slot_type(&self, slot: &str) -> Option<PortType> {
        match slot.split_once('.') {
            Some((step, port)) => self.get(step)?.outputs.get(port).copied(),
            None => self.roots().get(slot).copied(),
        }
    }

    /// Steps consuming `slot` directly.
    pub fn consumers(&self, slot: &str) -> BTreeSet<String> {
        match slot.split_once('.') {
            Some((step, port)) => self
                .edges
                .iter()
                .filter(|e| e.from.step == step && e.from.port == port)
                .map(|e| e.to.step.clone())
                .collect(),
            None => self
                .steps
                .iter()
                .filter(|s| {
                    s.inputs.contains_key(slot)
                        && self.feeder(&s.step_id, slot).is_none()
                        && !s.defaults.contains_key(slot)
                })
                .map(|s| s.step_id.clone())
                .collect(),
        }
    }

    /// `seeds` plus every step downstream of them.
    pub fn downstream(&self, seeds: impl IntoIterator<Item = String>) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = seeds.into_iter().collect();
        let mut stack: Vec<String> = out.iter().cloned().collect();
        while let Some(s) = stack.pop() {
            for e in self.edges.iter().filter(|e| e.from.step == s) {
                if out.insert(e.to.step.clone()) {
                    stack.push(e.to.step.clone());
                }
            }
        }
        out
    }

    /// Steps grouped into waves: every step's producers are in earlier waves.
    pub fn waves(&self) -> Vec<Vec<String>> {
        let mut level: BTreeMap<&str, usize> = BTreeMap::new();
        let mut remaining: Vec<&StepDef> = self.steps.iter().collect();
        while !remaining.is_empty() {
            let before = remaining.len();
            remaining.retain(|s| {
                let producers: Vec<&str> =
                    self.edges.iter().filter(|e| e.to.step == s.step_id).map(|e| e.from.step.as_str()).collect();
                if producers.iter().all(|p| level.contains_key(p)) {
                    let l = producers.iter().map(|p| level[p] + 1).max().unwrap_or(0);
                    level.insert(&s.step_id, l);
                    false
                } else {
                    true
                }
            });
            assert!(remaining.len() < before, "waves of a cyclic workflow");
        }
        let depth = level.values().max().map_or(0, |m| m + 1);
        let mut waves = vec![Vec::new(); depth];
        for (s, l) in level {
            waves[l].push(s.to_string());
        }
        waves
    }

    /// Check the definition and bring it into canonical form: ports filled
    /// from builtin signatures, steps sorted by id, edges sorted.
    pub fn normalized(mut self) -> Result<WorkflowDef, WorkflowError> {
        if !valid_name(&self.workflow_id) {
            return Err(WorkflowError::InvalidDefinition(format!("workflow id `{}` must match [A-Za-z0-9_-]+", self.workflow_id)));
        }
        let mut seen = BTreeSet::new();
        for s in &mut self.steps {
            if !valid_name(&s.step_id) {
                return Err(WorkflowError::InvalidDefinition(format!("step id `{}` must match [A-Za-z0-9_-]+", s.step_id)));
            }
            if !seen.insert(s.step_id.clone()) {
                return Err(WorkflowError::InvalidDefinition(format!("duplicate step `{}`", s.step_id)));
            }
            match &s.mode {
                StepMode::Automated { builtin, params } => {
                    let b = builtins::lookup(builtin).ok_or_else(|| WorkflowError::UnknownBuiltin(builtin.clone()))?;
                    b.fill_ports(&s.step_id, &mut s.inputs, &mut s.outputs)?;
                    (b.check)(params).map_err(|e| WorkflowError::InvalidDefinition(format!("step `{}`: {e}", s.step_id)))?;
                }
                StepMode::Manual { .. } => {
                    if s.outputs.is_empty() {
                        return Err(WorkflowError::InvalidDefinition(format!("manual step `{}` has no outputs", s.step_id)));
                    }
                }
            }
            for (port, v) in &s.defaults {
                let ty = s.inputs.get(port).ok_or_else(|| {
                    WorkflowError::InvalidDefinition(format!("default for unknown input `{}.{port}`", s.step_id))
                })?;
                if !v.fits(*ty) {
                    return Err(WorkflowError::PortTypeMismatch {
                        at: format!("{}.{port}", s.step_id),
                        expected: ty.to_string(),
                        found: "default value".into(),
                    });
                }
            }
        }
        self.steps.sort_by(|a, b| a.step_id.cmp(&b.step_id));
        self.edges.sort();
        self.edges.dedup();
        let mut fed = BTreeSet::new();
        for e in &self.edges {
            let from = self.get(&e.from.step).ok_or_else(|| WorkflowError::InvalidDefinition(format!("edge {e}: unknown step `{}`", e.from.step)))?;
            let to = self.get(&e.to.step).ok_or_else(|| WorkflowError::InvalidDefinition(format!("edge {e}: unknown step `{}`", e.to.step)))?;
            let ft = from.outputs.get(&e.from.port).ok_or_else(|| WorkflowError::InvalidDefinition(format!("edge {e}: no output `{}`", e.from)))?;
            let tt = to.inputs.get(&e.to.port).ok_or_else(|| WorkflowError::InvalidDefinition(format!("edge {e}: no input `{}`", e.to)))?;
            if ft != tt {
                return Err(WorkflowError::PortTypeMismatch { at: e.to_string(), expected: tt.to_string(), found: ft.to_string() });
            }
            if !fed.insert(&e.to) {
                return Err(WorkflowError::InvalidDefinition(format!("input `{}` has more than one producer", e.to)));
            }
        }
        if let Some(cycle) = self.cycle() {
            return Err(WorkflowError::CyclicWorkflow(cycle));
        }
        let mut root_types: BTreeMap<&str, PortType> = BTreeMap::new();
        for s in &self.steps {
            for (port, ty) in &s.inputs {
                if self.feeder(&s.step_id, port).is_none() && !s.defaults.contains_key(port) {
                    if let Some(prev) = root_types.insert(port, *ty).filter(|p| p != ty) {
                        return Err(WorkflowError::PortTypeMismatch {
                            at: format!("root input `{port}`"),
                            expected: prev.to_string(),
                            found: ty.to_string(),
                        });
                    }
                }
            }
        }
        Ok(self)
    }

    fn cycle(&self) -> Option<Vec<String>> {
        let mut indeg: BTreeMap<&str, usize> = self.steps.iter().map(|s| (s.step_id.as_str(), 0)).collect();
        let pairs: BTreeSet<(&str, &str)> = self.edges.iter().map(|e| (e.from.step.as_str(), e.to.step.as_str())).collect();
        for (_, t) in &pairs {
            *indeg.get_mut(t).expect("edge endpoints checked") += 1;
        }
        let mut ready: Vec<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(s, _)| *s).collect();
        while let Some(s) = ready.pop() {
            indeg.remove(s);
            for (_, t) in pairs.iter().filter(|(f, _)| *f == s) {
                let d = indeg.get_mut(t).expect("not yet removed");
                *d -= 1;
                if *d == 0 {
                    ready.push(t);
                }
            }
        }
        (!indeg.is_empty()).then(|| indeg.keys().map(|s| s.to_string()).collect())
    }
}
