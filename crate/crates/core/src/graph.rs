//! Typed, append-only provenance graph.
//!
//! Nodes are PROV entities, activities and agents, each optionally carrying a
//! sport specialisation. Edges point in the direction of dependency: the
//! source depends on (was derived from, used, was generated by ...) the
//! destination.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Attribute keys that are produced by the serializer itself and therefore
/// cannot be used as ordinary node or edge attributes.
pub const RESERVED_ATTR_KEYS: [&str; 3] = ["type", "seq", "connection"];

/// Prefixes owned by the document format.
pub const RESERVED_PREFIXES: [&str; 2] = ["prov", "sport"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("duplicate node id `{0}`")]
    DuplicateId(NodeId),
    #[error("edge endpoint `{0}` is not in the graph")]
    MissingEndpoint(NodeId),
    #[error("edge {0} would introduce a dependency cycle")]
    CycleIntroduced(String),
    #[error("entity `{0}` already has a generating activity")]
    DuplicateGeneration(NodeId),
    #[error("illegal relation: {0}")]
    IllegalRelation(String),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("invalid node id `{0}`")]
    InvalidId(String),
    #[error("invalid attributes on `{id}`: {reason}")]
    InvalidAttrs { id: String, reason: String },
}

/// Node identifier. Restricted to `[A-Za-z0-9_.%-]` so it can be written as
/// the local part of a qualified name without escaping.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self, GraphError> {
        let id = id.into();
        if Self::is_valid(&id) {
            Ok(NodeId(id))
        } else {
            Err(GraphError::InvalidId(id))
        }
    }

    pub fn is_valid(id: &str) -> bool {
        !id.is_empty()
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '%' | '-'))
    }

    /// Deterministic id from kind, label and timestamp. Replaying the same
    /// input produces the same ids, which keeps replay and merge idempotent.
    pub fn derive(kind: NodeKind, label: &str, ts_ms: Option<i64>) -> NodeId {
        let mut h = Sha256::new();
        h.update(kind.name().as_bytes());
        h.update([0u8]);
        h.update(label.as_bytes());
        h.update([0u8]);
        if let Some(ts) = ts_ms {
            h.update(ts.to_le_bytes());
        }
        let digest = hex::encode(h.finalize());
        NodeId(format!("{}-{}", kind.name(), &digest[..16]))
    }

    /// Replace every character that is not allowed in an id by `_`.
    pub fn sanitized(raw: &str) -> NodeId {
        let s: String = raw
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '%' | '-') {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        if s.is_empty() {
            NodeId("_".into())
        } else {
            NodeId(s)
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for NodeId {
    type Error = GraphError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        NodeId::new(value)
    }
}

impl From<NodeId> for String {
    fn from(value: NodeId) -> Self {
        value.0
    }
}

impl std::borrow::Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TopLevel {
    Entity,
    Activity,
    Agent,
}

/// Node kind: either a plain PROV construct or one of its sport
/// specialisations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Entity,
    Activity,
    Agent,
    VideoFeed,
    PhysicalGameState,
    Metric,
    Dataset,
    Annotation,
    Computation,
    DeIdentify,
    GameAction,
    Human,
    Player,
    PlayerRole,
    Sensor,
    WebPortal,
}

impl NodeKind {
    pub const SPECIALISATIONS: [NodeKind; 13] = [
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

    pub fn top_level(self) -> TopLevel {
        use NodeKind::*;
        match self {
            Entity | VideoFeed | PhysicalGameState | Metric | Dataset => TopLevel::Entity,
            Activity | Annotation | Computation | DeIdentify | GameAction => TopLevel::Activity,
            Agent | Human | Player | PlayerRole | Sensor | WebPortal => TopLevel::Agent,
        }
    }

    pub fn is_specialised(self) -> bool {
        !matches!(self, NodeKind::Entity | NodeKind::Activity | NodeKind::Agent)
    }

    /// The plain PROV kind this kind projects onto.
    pub fn generic(self) -> NodeKind {
        match self.top_level() {
            TopLevel::Entity => NodeKind::Entity,
            TopLevel::Activity => NodeKind::Activity,
            TopLevel::Agent => NodeKind::Agent,
        }
    }

    /// Kinds that describe the physical game rather than data.
    pub fn is_physical(self) -> bool {
        matches!(
            self,
            NodeKind::PhysicalGameState | NodeKind::GameAction | NodeKind::Player | NodeKind::PlayerRole
        )
    }

    pub fn name(self) -> &'static str {
        use NodeKind::*;
        match self {
            Entity => "Entity",
            Activity => "Activity",
            Agent => "Agent",
            VideoFeed => "VideoFeed",
            PhysicalGameState => "PhysicalGameState",
            Metric => "Metric",
            Dataset => "Dataset",
            Annotation => "Annotation",
            Computation => "Computation",
            DeIdentify => "DeIdentify",
            GameAction => "GameAction",
            Human => "Human",
            Player => "Player",
            PlayerRole => "PlayerRole",
            Sensor => "Sensor",
            WebPortal => "WebPortal",
        }
    }

    pub fn from_name(name: &str) -> Option<NodeKind> {
        Self::SPECIALISATIONS
            .iter()
            .chain([NodeKind::Entity, NodeKind::Activity, NodeKind::Agent].iter())
            .copied()
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    Used,
    WasGeneratedBy,
    WasAssociatedWith,
    ActedOnBehalfOf,
    WasDerivedFrom,
    WasInformedBy,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::Used,
        Relation::WasGeneratedBy,
        Relation::WasAssociatedWith,
        Relation::ActedOnBehalfOf,
        Relation::WasDerivedFrom,
        Relation::WasInformedBy,
    ];

    /// Relations that take part in the acyclicity invariant.
    pub fn is_dependency(self) -> bool {
        matches!(
            self,
            Relation::Used | Relation::WasGeneratedBy | Relation::WasDerivedFrom | Relation::WasInformedBy
        )
    }

    /// Required (source, destination) top-level kinds.
    pub fn endpoints(self) -> (TopLevel, TopLevel) {
        use TopLevel::*;
        match self {
            Relation::Used => (Activity, Entity),
            Relation::WasGeneratedBy => (Entity, Activity),
            Relation::WasAssociatedWith => (Activity, Agent),
            Relation::ActedOnBehalfOf => (Agent, Agent),
            Relation::WasDerivedFrom => (Entity, Entity),
            Relation::WasInformedBy => (Activity, Activity),
        }
    }

    /// PROV-N statement keyword.
    pub fn keyword(self) -> &'static str {
        match self {
            Relation::Used => "used",
            Relation::WasGeneratedBy => "wasGeneratedBy",
            Relation::WasAssociatedWith => "wasAssociatedWith",
            Relation::ActedOnBehalfOf => "actedOnBehalfOf",
            Relation::WasDerivedFrom => "wasDerivedFrom",
            Relation::WasInformedBy => "wasInformedBy",
        }
    }

    pub fn from_keyword(kw: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.keyword() == kw)
    }
}

/// Data dependency vs physical causality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConnectionClass {
    DataDependency,
    PhysicalCausality,
}

impl ConnectionClass {
    pub fn tag(self) -> &'static str {
        match self {
            ConnectionClass::DataDependency => "data",
            ConnectionClass::PhysicalCausality => "physical",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "data" => Some(ConnectionClass::DataDependency),
            "physical" => Some(ConnectionClass::PhysicalCausality),
            _ => None,
        }
    }
}

/// Relation plus connection class. A `None` class is the unspecialised PROV
/// view produced by stripping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeKind {
    pub relation: Relation,
    pub connection: Option<ConnectionClass>,
}

impl EdgeKind {
    pub fn data(relation: Relation) -> Self {
        EdgeKind { relation, connection: Some(ConnectionClass::DataDependency) }
    }

    pub fn physical(relation: Relation) -> Self {
        EdgeKind { relation, connection: Some(ConnectionClass::PhysicalCausality) }
    }
}

pub type Attrs = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub label: String,
    #[serde(default)]
    pub attrs: Attrs,
    /// Logical sequence number, assigned by the graph on insertion.
    #[serde(default)]
    pub created_at: u64,
}

impl ProvNode {
    pub fn new(id: NodeId, kind: NodeKind, label: impl Into<String>) -> Self {
        ProvNode { id, kind, label: label.into(), attrs: Attrs::new(), created_at: 0 }
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attrs.insert(key.into(), value.into());
        self
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).map(String::as_str)
    }

    pub fn ts_ms(&self) -> Option<i64> {
        self.attr("ts_ms").and_then(|v| v.parse().ok())
    }

    /// Same content, ignoring the sequence number.
    pub fn same_content(&self, other: &ProvNode) -> bool {
        self.id == other.id && self.kind == other.kind && self.label == other.label && self.attrs == other.attrs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProvEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: EdgeKind,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub attrs: Attrs,
}

impl ProvEdge {
    pub fn new(src: NodeId, dst: NodeId, kind: EdgeKind) -> Self {
        ProvEdge { src, dst, kind, label: None, attrs: Attrs::new() }
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attrs.insert(key.into(), value.into());
        self
    }

    pub fn relation(&self) -> Relation {
        self.kind.relation
    }
}

impl fmt::Display for ProvEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({} -> {})", self.kind.relation.keyword(), self.src, self.dst)
    }
}

/// Which invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    MissingEndpoint,
    IllegalRelation,
    PhysicalClassMismatch,
    DuplicateGeneration,
    Cycle,
    VideoFeedAttrs,
    ReservedAttr,
    UndeclaredPrefix,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub ids: Vec<String>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}@{}: {}", self.rule, self.ids.join(","), self.detail)
    }
}

/// Nodes and edges added by one logical operation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDelta {
    pub nodes: Vec<ProvNode>,
    pub edges: Vec<ProvEdge>,
}

impl GraphDelta {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    pub fn extend(&mut self, other: GraphDelta) {
        self.nodes.extend(other.nodes);
        self.edges.extend(other.edges);
    }
}

/// Append-only provenance graph.
///
/// Equality compares nodes (including sequence numbers), the edge set and
/// declared extra namespaces; insertion order of edges is irrelevant.
#[derive(Debug, Clone, Default)]
pub struct ProvGraph {
    nodes: BTreeMap<NodeId, ProvNode>,
    edges: Vec<ProvEdge>,
    out_adj: HashMap<NodeId, Vec<usize>>,
    in_adj: HashMap<NodeId, Vec<usize>>,
    namespaces: BTreeMap<String, String>,
    next_seq: u64,
}

impl PartialEq for ProvGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.namespaces == other.namespaces
            && self.edges.len() == other.edges.len()
            && self.edge_set() == other.edge_set()
    }
}

impl Eq for ProvGraph {}

impl ProvGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&ProvNode> {
        self.nodes.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &ProvNode> {
        self.nodes.values()
    }

    /// Edges in insertion order.
    pub fn edges(&self) -> impl Iterator<Item = &ProvEdge> {
        self.edges.iter()
    }

    pub fn edge_set(&self) -> BTreeSet<&ProvEdge> {
        self.edges.iter().collect()
    }

    pub fn out_edges<'a>(&'a self, id: &str) -> impl Iterator<Item = &'a ProvEdge> + 'a {
        self.out_adj.get(id).into_iter().flatten().map(move |&i| &self.edges[i])
    }

    pub fn in_edges<'a>(&'a self, id: &str) -> impl Iterator<Item = &'a ProvEdge> + 'a {
        self.in_adj.get(id).into_iter().flatten().map(move |&i| &self.edges[i])
    }

    pub fn namespaces(&self) -> &BTreeMap<String, String> {
        &self.namespaces
    }

    /// Declare an extra namespace prefix used by attribute keys.
    pub fn declare_namespace(&mut self, prefix: impl Into<String>, uri: impl Into<String>) {
        let prefix = prefix.into();
        if !RESERVED_PREFIXES.contains(&prefix.as_str()) {
            self.namespaces.insert(prefix, uri.into());
        }
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Insert a node; its `created_at` is set to the next sequence number.
    pub fn add_node(&mut self, mut node: ProvNode) -> Result<&ProvNode, GraphError> {
        node.created_at = self.next_seq;
        self.insert_node(node)
    }

    /// Insert a node keeping the sequence number it carries (used when
    /// reloading or merging documents).
    pub fn restore_node(&mut self, node: ProvNode) -> Result<&ProvNode, GraphError> {
        self.insert_node(node)
    }

    fn insert_node(&mut self, node: ProvNode) -> Result<&ProvNode, GraphError> {
        if self.nodes.contains_key(&node.id) {
            return Err(GraphError::DuplicateId(node.id));
        }
        check_node_attrs(&node, &self.namespaces)?;
        self.next_seq = self.next_seq.max(node.created_at + 1);
        let id = node.id.clone();
        Ok(self.nodes.entry(id).or_insert(node))
    }

    /// Insert an edge. Adding an edge equal to an existing one is a no-op.
    pub fn add_edge(&mut self, edge: ProvEdge) -> Result<(), GraphError> {
        let (src, dst) = match (self.nodes.get(&edge.src), self.nodes.get(&edge.dst)) {
            (None, _) => return Err(GraphError::MissingEndpoint(edge.src)),
            (_, None) => return Err(GraphError::MissingEndpoint(edge.dst)),
            (Some(s), Some(d)) => (s, d),
        };
        if let Some(reason) = relation_error(&edge, src.kind, dst.kind) {
            return Err(GraphError::IllegalRelation(reason));
        }
        for key in edge.attrs.keys() {
            if let Some(reason) = attr_key_error(key, &self.namespaces) {
                return Err(GraphError::InvalidAttrs { id: edge.to_string(), reason });
            }
        }
        if self.out_edges(edge.src.as_str()).any(|e| *e == edge) {
            return Ok(());
        }
        let relation = edge.kind.relation;
        if relation == Relation::WasGeneratedBy
            && self
                .out_edges(edge.src.as_str())
                .any(|e| e.kind.relation == Relation::WasGeneratedBy)
        {
            return Err(GraphError::DuplicateGeneration(edge.src));
        }
        if relation.is_dependency() && self.depends_on(&edge.dst, &edge.src) {
            return Err(GraphError::CycleIntroduced(edge.to_string()));
        }
        let idx = self.edges.len();
        self.out_adj.entry(edge.src.clone()).or_default().push(idx);
        self.in_adj.entry(edge.dst.clone()).or_default().push(idx);
        self.edges.push(edge);
        Ok(())
    }

    /// True when `target` is reachable from `from` along dependency edges.
    fn depends_on(&self, from: &NodeId, target: &NodeId) -> bool {
        if from == target {
            return true;
        }
        // nothing depends on a node without incoming dependency edges
        let depended_on = self.in_adj.get(target).is_some_and(|v| v.iter().any(|&i| self.edges[i].kind.relation.is_dependency()));
        if !depended_on {
            return false;
        }
        let mut seen: HashSet<&str> = HashSet::new();
        let mut stack = vec![from.as_str()];
        while let Some(cur) = stack.pop() {
            if !seen.insert(cur) {
                continue;
            }
            for e in self.out_edges(cur) {
                if !e.kind.relation.is_dependency() {
                    continue;
                }
                if e.dst == *target {
                    return true;
                }
                stack.push(e.dst.as_str());
            }
        }
        false
    }

    /// Apply a delta atomically: either every node and edge is added or the
    /// graph is left untouched.
    pub fn apply_delta(&mut self, delta: &GraphDelta) -> Result<(), GraphError> {
        let edge_mark = self.edges.len();
        let seq_mark = self.next_seq;
        let mut added: Vec<NodeId> = Vec::new();
        let result = (|| {
            for n in &delta.nodes {
                self.add_node(n.clone())?;
                added.push(n.id.clone());
            }
            for e in &delta.edges {
                self.add_edge(e.clone())?;
            }
            Ok(())
        })();
        if result.is_err() {
            while self.edges.len() > edge_mark {
                let e = self.edges.pop().expect("non-empty");
                if let Some(v) = self.out_adj.get_mut(&e.src) {
                    v.pop();
                }
                if let Some(v) = self.in_adj.get_mut(&e.dst) {
                    v.pop();
                }
            }
            for id in added {
                self.nodes.remove(&id);
            }
            self.next_seq = seq_mark;
        }
        result
    }

    /// Build a graph without checking invariants. Use [`ProvGraph::validate`]
    /// afterwards.
    pub fn from_parts_unchecked(
        nodes: impl IntoIterator<Item = ProvNode>,
        edges: impl IntoIterator<Item = ProvEdge>,
        namespaces: BTreeMap<String, String>,
    ) -> Self {
        let mut g = ProvGraph { namespaces, ..Default::default() };
        for n in nodes {
            g.next_seq = g.next_seq.max(n.created_at + 1);
            g.nodes.insert(n.id.clone(), n);
        }
        let mut seen = HashSet::new();
        for e in edges {
            if !seen.insert(e.clone()) {
                continue;
            }
            let idx = g.edges.len();
            g.out_adj.entry(e.src.clone()).or_default().push(idx);
            g.in_adj.entry(e.dst.clone()).or_default().push(idx);
            g.edges.push(e);
        }
        g
    }

    /// Check every type and graph invariant. Empty iff the graph is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for n in self.nodes.values() {
            if let Err(GraphError::InvalidAttrs { reason, .. }) = check_node_attrs(n, &self.namespaces) {
                let rule = if n.kind == NodeKind::VideoFeed && reason.starts_with("video feed") {
                    Rule::VideoFeedAttrs
                } else if reason.contains("prefix") && reason.contains("not declared") {
                    Rule::UndeclaredPrefix
                } else {
                    Rule::ReservedAttr
                };
                out.push(Violation { rule, ids: vec![n.id.to_string()], detail: reason });
            }
        }
        let mut generated: BTreeMap<&NodeId, usize> = BTreeMap::new();
        for e in &self.edges {
            let (src, dst) = match (self.nodes.get(&e.src), self.nodes.get(&e.dst)) {
                (Some(s), Some(d)) => (s, d),
                (s, _) => {
                    let missing = if s.is_none() { &e.src } else { &e.dst };
                    out.push(Violation {
                        rule: Rule::MissingEndpoint,
                        ids: vec![missing.to_string()],
                        detail: e.to_string(),
                    });
                    continue;
                }
            };
            if let Some(reason) = relation_error(e, src.kind, dst.kind) {
                let rule = if reason.contains("physical") {
                    Rule::PhysicalClassMismatch
                } else {
                    Rule::IllegalRelation
                };
                out.push(Violation { rule, ids: vec![e.src.to_string(), e.dst.to_string()], detail: reason });
            }
            for key in e.attrs.keys() {
                if let Some(reason) = attr_key_error(key, &self.namespaces) {
                    let rule = if reason.contains("not declared") { Rule::UndeclaredPrefix } else { Rule::ReservedAttr };
                    out.push(Violation { rule, ids: vec![e.src.to_string(), e.dst.to_string()], detail: reason });
                }
            }
            if e.kind.relation == Relation::WasGeneratedBy {
                *generated.entry(&e.src).or_default() += 1;
            }
        }
        for (id, n) in generated {
            if n > 1 {
                out.push(Violation {
                    rule: Rule::DuplicateGeneration,
                    ids: vec![id.to_string()],
                    detail: format!("{n} generating activities"),
                });
            }
        }
        let cyclic = self.cyclic_nodes();
        if !cyclic.is_empty() {
            out.push(Violation {
                rule: Rule::Cycle,
                ids: cyclic.iter().map(|id| id.to_string()).collect(),
                detail: "dependency edges form a cycle".into(),
            });
        }
        out.sort();
        out
    }

    /// Topological order of all nodes over dependency edges (dependents
    /// before their dependencies), or `None` if there is a cycle.
    pub fn topological_order(&self) -> Option<Vec<NodeId>> {
        let order = self.kahn();
        (order.len() == self.nodes.len()).then_some(order)
    }

    fn cyclic_nodes(&self) -> Vec<NodeId> {
        let order = self.kahn();
        if order.len() == self.nodes.len() {
            return Vec::new();
        }
        let done: HashSet<&NodeId> = order.iter().collect();
        self.nodes.keys().filter(|id| !done.contains(id)).cloned().collect()
    }

    fn kahn(&self) -> Vec<NodeId> {
        let mut indeg: BTreeMap<&NodeId, usize> = self.nodes.keys().map(|k| (k, 0)).collect();
        for e in &self.edges {
            if e.kind.relation.is_dependency() && self.nodes.contains_key(&e.src) {
                if let Some(d) = indeg.get_mut(&e.dst) {
                    *d += 1;
                }
            }
        }
        let mut queue: VecDeque<&NodeId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(k, _)| *k).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = queue.pop_front() {
            order.push(id.clone());
            for e in self.out_edges(id.as_str()) {
                if !e.kind.relation.is_dependency() {
                    continue;
                }
                if let Some(d) = indeg.get_mut(&e.dst) {
                    *d -= 1;
                    if *d == 0 {
                        queue.push_back(self.nodes.get_key_value(&e.dst).expect("present").0);
                    }
                }
            }
        }
        order
    }

    /// Induced subgraph on `ids`: edges are kept iff both endpoints are kept.
    pub fn subgraph<'a, I>(&self, ids: I) -> Result<ProvGraph, GraphError>
    where
        I: IntoIterator<Item = &'a NodeId>,
    {
        let mut keep: BTreeSet<&NodeId> = BTreeSet::new();
        for id in ids {
            if !self.nodes.contains_key(id) {
                return Err(GraphError::UnknownNode(id.clone()));
            }
            keep.insert(id);
        }
        let nodes = keep.iter().map(|id| self.nodes[*id].clone());
        let edges = self
            .edges
            .iter()
            .filter(|e| keep.contains(&e.src) && keep.contains(&e.dst))
            .cloned();
        Ok(ProvGraph::from_parts_unchecked(nodes, edges, self.namespaces.clone()))
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    /// The activity that generated `entity`, if any.
    pub fn generator(&self, entity: &str) -> Option<&NodeId> {
        self.out_edges(entity)
            .find(|e| e.kind.relation == Relation::WasGeneratedBy)
            .map(|e| &e.dst)
    }

    /// Agents associated with `activity`.
    pub fn associated_agents<'a>(&'a self, activity: &str) -> impl Iterator<Item = &'a NodeId> + 'a {
        self.out_edges(activity)
            .filter(|e| e.kind.relation == Relation::WasAssociatedWith)
            .map(|e| &e.dst)
    }
}

fn relation_error(edge: &ProvEdge, src: NodeKind, dst: NodeKind) -> Option<String> {
    let (want_src, want_dst) = edge.kind.relation.endpoints();
    if src.top_level() != want_src || dst.top_level() != want_dst {
        return Some(format!(
            "{} requires {:?} -> {:?}, got {} -> {}",
            edge.kind.relation.keyword(),
            want_src,
            want_dst,
            src,
            dst
        ));
    }
    if edge.kind.connection == Some(ConnectionClass::PhysicalCausality) && !(src.is_physical() && dst.is_physical()) {
        return Some(format!("physical causality between non-physical nodes in {edge}"));
    }
    None
}

pub(crate) fn attr_key_error(key: &str, namespaces: &BTreeMap<String, String>) -> Option<String> {
    match key.split_once(':') {
        None => {
            let ok = key.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && key.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'));
            if !ok {
                Some(format!("invalid attribute key `{key}`"))
            } else if RESERVED_ATTR_KEYS.contains(&key) {
                Some(format!("attribute key `{key}` is reserved"))
            } else {
                None
            }
        }
        Some((prefix, local)) => {
            if RESERVED_PREFIXES.contains(&prefix) {
                Some(format!("attribute prefix `{prefix}` is reserved"))
            } else if local.is_empty() || !NodeId::is_valid(local) {
                Some(format!("invalid attribute key `{key}`"))
            } else if !namespaces.contains_key(prefix) {
                Some(format!("prefix `{prefix}` is not declared"))
            } else {
                None
            }
        }
    }
}

fn check_node_attrs(node: &ProvNode, namespaces: &BTreeMap<String, String>) -> Result<(), GraphError> {
    let fail = |reason: String| GraphError::InvalidAttrs { id: node.id.to_string(), reason };
    for key in node.attrs.keys() {
        if let Some(reason) = attr_key_error(key, namespaces) {
            return Err(fail(reason));
        }
    }
    if node.kind == NodeKind::VideoFeed {
        if node.attr("video_ref").is_none() {
            return Err(fail("video feed requires video_ref".into()));
        }
        let start = node.attr("start_ms").and_then(|v| v.parse::<i64>().ok());
        let end = node.attr("end_ms").and_then(|v| v.parse::<i64>().ok());
        match (start, end) {
            (Some(s), Some(e)) if s <= e => {}
            _ => return Err(fail("video feed requires integer start_ms <= end_ms".into())),
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    #[serde(default)]
    namespaces: BTreeMap<String, String>,
    nodes: Vec<ProvNode>,
    edges: Vec<ProvEdge>,
}

impl Serialize for ProvGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut edges = self.edges.clone();
        edges.sort();
        GraphRepr {
            namespaces: self.namespaces.clone(),
            nodes: self.nodes.values().cloned().collect(),
            edges,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProvGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = GraphRepr::deserialize(d)?;
        Ok(ProvGraph::from_parts_unchecked(repr.nodes, repr.edges, repr.namespaces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn node(s: &str, kind: NodeKind) -> ProvNode {
        ProvNode::new(id(s), kind, s)
    }

    #[test]
    fn every_specialisation_has_one_top_level() {
        let entities = NodeKind::SPECIALISATIONS.iter().filter(|k| k.top_level() == TopLevel::Entity).count();
        let activities = NodeKind::SPECIALISATIONS.iter().filter(|k| k.top_level() == TopLevel::Activity).count();
        let agents = NodeKind::SPECIALISATIONS.iter().filter(|k| k.top_level() == TopLevel::Agent).count();
        assert_eq!((entities, activities, agents), (4, 4, 5));
        for k in NodeKind::SPECIALISATIONS {
            assert_eq!(NodeKind::from_name(k.name()), Some(k));
            assert!(k.is_specialised());
            assert!(!k.generic().is_specialised());
        }
    }

    #[test]
    fn singleton_insert_and_duplicate() {
        let mut g = ProvGraph::new();
        g.add_node(node("P7", NodeKind::Player)).unwrap();
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.add_node(node("P7", NodeKind::Player)).unwrap_err(), GraphError::DuplicateId(id("P7")));
        assert_eq!(g.node_count(), 1);
    }

    #[test]
    fn created_at_is_monotone() {
        let mut g = ProvGraph::new();
        g.add_node(node("a", NodeKind::Entity)).unwrap();
        g.add_node(node("b", NodeKind::Entity)).unwrap();
        assert_eq!(g.node("a").unwrap().created_at, 0);
        assert_eq!(g.node("b").unwrap().created_at, 1);
    }

    #[test]
    fn duplicate_generation_rejected() {
        let mut g = ProvGraph::new();
        g.add_node(node("goal_state", NodeKind::PhysicalGameState)).unwrap();
        g.add_node(node("kick_P7", NodeKind::GameAction)).unwrap();
        g.add_node(node("kick_P12", NodeKind::GameAction)).unwrap();
        let gen = |a: &str| ProvEdge::new(id("goal_state"), id(a), EdgeKind::physical(Relation::WasGeneratedBy));
        g.add_edge(gen("kick_P7")).unwrap();
        // identical edge is a no-op
        g.add_edge(gen("kick_P7")).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.add_edge(gen("kick_P12")).unwrap_err(), GraphError::DuplicateGeneration(id("goal_state")));
    }

    #[test]
    fn two_cycle_rejected() {
        let mut g = ProvGraph::new();
        g.add_node(node("kick_P7", NodeKind::GameAction)).unwrap();
        g.add_node(node("possession_P7", NodeKind::PhysicalGameState)).unwrap();
        g.add_edge(ProvEdge::new(id("kick_P7"), id("possession_P7"), EdgeKind::physical(Relation::Used)))
            .unwrap();
        let err = g
            .add_edge(ProvEdge::new(
                id("possession_P7"),
                id("kick_P7"),
                EdgeKind::physical(Relation::WasGeneratedBy),
            ))
            .unwrap_err();
        assert!(matches!(err, GraphError::CycleIntroduced(_)));
    }

    #[test]
    fn acted_on_behalf_of_needs_agents() {
        let mut g = ProvGraph::new();
        g.add_node(node("P7", NodeKind::Player)).unwrap();
        g.add_node(node("role.Half_Forward", NodeKind::PlayerRole)).unwrap();
        g.add_node(node("state", NodeKind::PhysicalGameState)).unwrap();
        g.add_edge(ProvEdge::new(id("P7"), id("role.Half_Forward"), EdgeKind::physical(Relation::ActedOnBehalfOf)))
            .unwrap();
        let err = g
            .add_edge(ProvEdge::new(id("P7"), id("state"), EdgeKind::physical(Relation::ActedOnBehalfOf)))
            .unwrap_err();
        assert!(matches!(err, GraphError::IllegalRelation(_)));
    }

    #[test]
    fn physical_class_needs_physical_endpoints() {
        let mut g = ProvGraph::new();
        g.add_node(node("m", NodeKind::Metric)).unwrap();
        g.add_node(node("s", NodeKind::PhysicalGameState)).unwrap();
        let err = g
            .add_edge(ProvEdge::new(id("m"), id("s"), EdgeKind::physical(Relation::WasDerivedFrom)))
            .unwrap_err();
        assert!(matches!(err, GraphError::IllegalRelation(_)));
        g.add_edge(ProvEdge::new(id("m"), id("s"), EdgeKind::data(Relation::WasDerivedFrom))).unwrap();
    }

    #[test]
    fn missing_endpoint() {
        let mut g = ProvGraph::new();
        g.add_node(node("a", NodeKind::Entity)).unwrap();
        let err = g
            .add_edge(ProvEdge::new(id("a"), id("b"), EdgeKind::data(Relation::WasDerivedFrom)))
            .unwrap_err();
        assert_eq!(err, GraphError::MissingEndpoint(id("b")));
    }

    #[test]
    fn video_feed_attrs_checked() {
        let mut g = ProvGraph::new();
        let bad = node("v", NodeKind::VideoFeed).with_attr("video_ref", "g1.mp4").with_attr("start_ms", "10").with_attr("end_ms", "5");
        assert!(matches!(g.add_node(bad).unwrap_err(), GraphError::InvalidAttrs { .. }));
        let ok = node("v", NodeKind::VideoFeed).with_attr("video_ref", "g1.mp4").with_attr("start_ms", "5").with_attr("end_ms", "5");
        g.add_node(ok).unwrap();
    }

    #[test]
    fn reserved_and_undeclared_attr_keys() {
        let mut g = ProvGraph::new();
        assert!(g.add_node(node("a", NodeKind::Entity).with_attr("type", "x")).is_err());
        assert!(g.add_node(node("a", NodeKind::Entity).with_attr("vt:desc", "x")).is_err());
        g.declare_namespace("vt", "http://www.vistrails.org/registry.xsd");
        g.add_node(node("a", NodeKind::Entity).with_attr("vt:desc", "x")).unwrap();
    }

    #[test]
    fn validate_empty_and_duplicate_generation() {
        assert!(ProvGraph::new().validate().is_empty());
        let e = id("e");
        let g = ProvGraph::from_parts_unchecked(
            [node("e", NodeKind::Dataset), node("a1", NodeKind::Computation), node("a2", NodeKind::Computation)],
            [
                ProvEdge::new(e.clone(), id("a1"), EdgeKind::data(Relation::WasGeneratedBy)),
                ProvEdge::new(e.clone(), id("a2"), EdgeKind::data(Relation::WasGeneratedBy)),
            ],
            BTreeMap::new(),
        );
        let v = g.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::DuplicateGeneration);
        assert_eq!(v[0].ids, vec!["e".to_string()]);
    }

    #[test]
    fn validate_reports_cycles() {
        let g = ProvGraph::from_parts_unchecked(
            [node("a", NodeKind::Entity), node("b", NodeKind::Entity)],
            [
                ProvEdge::new(id("a"), id("b"), EdgeKind::data(Relation::WasDerivedFrom)),
                ProvEdge::new(id("b"), id("a"), EdgeKind::data(Relation::WasDerivedFrom)),
            ],
            BTreeMap::new(),
        );
        let v = g.validate();
        assert_eq!(v[0].rule, Rule::Cycle);
        assert!(g.topological_order().is_none());
    }

    #[test]
    fn apply_delta_is_atomic() {
        let mut g = ProvGraph::new();
        g.add_node(node("a", NodeKind::Entity)).unwrap();
        let before = g.clone();
        let delta = GraphDelta {
            nodes: vec![node("b", NodeKind::Entity), node("c", NodeKind::Activity)],
            edges: vec![
                ProvEdge::new(id("b"), id("a"), EdgeKind::data(Relation::WasDerivedFrom)),
                ProvEdge::new(id("b"), id("zzz"), EdgeKind::data(Relation::WasDerivedFrom)),
            ],
        };
        assert!(g.apply_delta(&delta).is_err());
        assert_eq!(g, before);
        assert_eq!(g.next_seq(), before.next_seq());
    }

    #[test]
    fn derived_ids_are_deterministic() {
        let a = NodeId::derive(NodeKind::PhysicalGameState, "goal", Some(20));
        let b = NodeId::derive(NodeKind::PhysicalGameState, "goal", Some(20));
        let c = NodeId::derive(NodeKind::PhysicalGameState, "goal", Some(21));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(NodeId::is_valid(a.as_str()));
    }

    #[test]
    fn subgraph_identity_and_unknown() {
        let mut g = ProvGraph::new();
        g.add_node(node("a", NodeKind::Entity)).unwrap();
        g.add_node(node("b", NodeKind::Entity)).unwrap();
        g.add_edge(ProvEdge::new(id("a"), id("b"), EdgeKind::data(Relation::WasDerivedFrom))).unwrap();
        let all: Vec<NodeId> = g.node_ids().cloned().collect();
        assert_eq!(g.subgraph(&all).unwrap(), g);
        let only_a = g.subgraph([&id("a")]).unwrap();
        assert_eq!((only_a.node_count(), only_a.edge_count()), (1, 0));
        assert_eq!(g.subgraph([&id("x")]).unwrap_err(), GraphError::UnknownNode(id("x")));
    }
}
