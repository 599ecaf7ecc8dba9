//! De-identification, partial export and merge of collaborator provenance.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use serde_json::Value as Cell;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{GraphError, NodeId, NodeKind, ProvEdge, ProvGraph, ProvNode};
use crate::sprov::{ProvDocument, SprovError};
use crate::table::Table;

/// Columns holding player references unless a step says otherwise.
pub const PLAYER_COLUMNS: [&str; 3] = ["player", "target_player", "scorer"];

pub const SECRET_NOTICE: &str = "SECRET: this map re-identifies players. Do not share it.";

/// Attribute marking entities whose content must never leave the club.
pub const SECRET_ATTR: &str = "secret";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrivacyError {
    #[error("no player ids given")]
    EmptyInput,
    #[error("player `{0}` is not in the redaction map")]
    UnmappedPlayer(String),
    #[error("code `{0}` is not in the redaction map")]
    UnknownCode(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("`{0}` is not a de-identify activity")]
    InvalidBoundary(String),
    #[error("frontier mismatch: {0}")]
    FrontierMismatch(String),
    #[error("node `{0}` differs from the local copy")]
    ConflictingNode(String),
    #[error("external document: {0}")]
    ParseError(#[from] SprovError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Private bijection between player ids and anonymous codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedactionMap {
    #[serde(rename = "SECRET")]
    pub notice: String,
    pub map_id: String,
    pub created_by: String,
    pub secret: bool,
    /// player id -> code
    pub entries: BTreeMap<String, String>,
}

type HmacSha256 = Hmac<Sha256>;

/// Build a map with codes `A` + 6 hex digits from a keyed hash of each id.
/// Same ids and seed give the same map.
pub fn make_map<'a>(player_ids: impl IntoIterator<Item = &'a str>, seed: &[u8]) -> Result<RedactionMap, PrivacyError> {
    let ids: BTreeSet<&str> = player_ids.into_iter().collect();
    if ids.is_empty() {
        return Err(PrivacyError::EmptyInput);
    }
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut entries = BTreeMap::new();
    for id in &ids {
        let mut counter = 0u32;
        let code = loop {
            let mut mac = <HmacSha256 as KeyInit>::new_from_slice(seed).expect("hmac takes any key length");
            mac.update(id.as_bytes());
            mac.update(&[0]);
            mac.update(&counter.to_be_bytes());
            let tag = mac.finalize().into_bytes();
            let code = format!("A{}", hex::encode(&tag[..3]));
            counter += 1;
            if used.contains(&code) || contains_any(&code, &ids) {
                continue;
            }
            break code;
        };
        used.insert(code.clone());
        entries.insert(id.to_string(), code);
    }
    let mut h = Sha256::new();
    h.update(seed);
    for id in &ids {
        h.update(id.as_bytes());
        h.update([0]);
    }
    Ok(RedactionMap {
        notice: SECRET_NOTICE.to_string(),
        map_id: format!("map-{}", &hex::encode(h.finalize())[..12]),
        created_by: "analyst".to_string(),
        secret: true,
        entries,
    })
}

fn contains_any(code: &str, ids: &BTreeSet<&str>) -> bool {
    (0..code.len()).any(|i| (i + 1..=code.len()).any(|j| ids.contains(&code[i..j])))
}

impl RedactionMap {
    pub fn with_creator(mut self, agent: impl Into<String>) -> Self {
        self.created_by = agent.into();
        self
    }

    pub fn code(&self, player: &str) -> Option<&str> {
        self.entries.get(player).map(String::as_str)
    }

    pub fn reverse(&self) -> HashMap<&str, &str> {
        self.entries.iter().map(|(p, c)| (c.as_str(), p.as_str())).collect()
    }

    pub fn is_bijective(&self) -> bool {
        self.reverse().len() == self.entries.len()
    }
}

fn substitute(
    table: &Table,
    columns: &[&str],
    mut f: impl FnMut(&str) -> Result<String, PrivacyError>,
) -> Result<Table, PrivacyError> {
    let idx: Vec<usize> = columns.iter().filter_map(|c| table.column(c)).collect();
    let mut out = table.clone();
    for row in &mut out.rows {
        for &i in &idx {
            if let Cell::String(s) = &row[i] {
                row[i] = Cell::String(f(s)?);
            }
        }
    }
    Ok(out)
}

/// Replace player references in `columns` with their codes.
pub fn deidentify(table: &Table, map: &RedactionMap, columns: &[&str]) -> Result<Table, PrivacyError> {
    substitute(table, columns, |p| {
        map.code(p).map(str::to_string).ok_or_else(|| PrivacyError::UnmappedPlayer(p.to_string()))
    })
}

/// Inverse of [`deidentify`].
pub fn reidentify(table: &Table, map: &RedactionMap, columns: &[&str]) -> Result<Table, PrivacyError> {
    let rev = map.reverse();
    substitute(table, columns, |c| {
        rev.get(c).map(|p| p.to_string()).ok_or_else(|| PrivacyError::UnknownCode(c.to_string()))
    })
}

fn is_secret(n: &ProvNode) -> bool {
    n.attr(SECRET_ATTR) == Some("true")
}

/// Nodes with a dependency path into `seeds`, not expanding through `stop`.
fn upstream_of(graph: &ProvGraph, seeds: &BTreeSet<&NodeId>, stop: &BTreeSet<&NodeId>) -> BTreeSet<NodeId> {
    let mut seen: BTreeSet<NodeId> = BTreeSet::new();
    let mut stack: Vec<&NodeId> = seeds.iter().copied().collect();
    while let Some(id) = stack.pop() {
        for e in graph.in_edges(id.as_str()).filter(|e| e.kind.relation.is_dependency()) {
            if !stop.contains(&e.src) && seen.insert(e.src.clone()) {
                stack.push(&e.src);
            }
        }
    }
    seen
}

/// Document with everything produced from the boundary activities onwards.
/// Boundary activities appear as opaque frontier nodes; anything that can
/// reach a secret entity other than through the boundary is left out.
pub fn export_partial<'a>(
    graph: &ProvGraph,
    boundary: impl IntoIterator<Item = &'a str>,
) -> Result<ProvDocument, PrivacyError> {
    let mut frontier: BTreeSet<&NodeId> = BTreeSet::new();
    for id in boundary {
        let n = graph.node(id).ok_or_else(|| PrivacyError::UnknownNode(id.to_string()))?;
        if n.kind != NodeKind::DeIdentify {
            return Err(PrivacyError::InvalidBoundary(id.to_string()));
        }
        frontier.insert(&n.id);
    }
    if frontier.is_empty() {
        return Ok(ProvDocument::from_graph(graph));
    }
    let downstream = upstream_of(graph, &frontier, &BTreeSet::new());
    let secrets: BTreeSet<&NodeId> = graph.nodes().filter(|n| is_secret(n)).map(|n| &n.id).collect();
    let mut tainted = upstream_of(graph, &secrets, &frontier);
    tainted.extend(secrets.iter().map(|id| (*id).clone()));

    let mut keep: BTreeSet<NodeId> = downstream.difference(&tainted).cloned().collect();
    keep.retain(|id| !frontier.contains(id));
    let agents: Vec<NodeId> = keep
        .iter()
        .flat_map(|id| graph.associated_agents(id.as_str()))
        .filter(|a| graph.node(a.as_str()).is_some_and(|n| !matches!(n.kind, NodeKind::Player | NodeKind::PlayerRole)))
        .cloned()
        .collect();
    keep.extend(agents);

    let mut nodes: Vec<ProvNode> = keep.iter().map(|id| graph.node(id.as_str()).expect("kept ids exist").clone()).collect();
    for id in &frontier {
        let n = graph.node(id.as_str()).expect("checked");
        nodes.push(ProvNode { label: String::new(), attrs: BTreeMap::new(), ..n.clone() });
    }
    let edges: Vec<ProvEdge> = graph
        .edges()
        .filter(|e| keep.contains(&e.src) && (keep.contains(&e.dst) || frontier.contains(&e.dst)))
        .cloned()
        .collect();
    let part = ProvGraph::from_parts_unchecked(nodes, edges, graph.namespaces().clone());
    Ok(ProvDocument::from_graph(&part))
}

fn is_frontier(n: &ProvNode, graph: &ProvGraph) -> bool {
    n.kind == NodeKind::DeIdentify && n.label.is_empty() && n.attrs.is_empty() && graph.out_edges(n.id.as_str()).next().is_none()
}

/// Stitch a collaborator document onto the local graph at its frontier.
pub fn merge_external(local: &ProvGraph, external: &ProvDocument) -> Result<ProvGraph, PrivacyError> {
    let ext = external.to_graph()?;
    let mut merged = local.clone();
    let mut frontier = 0;
    for n in ext.nodes() {
        if is_frontier(n, &ext) {
            match local.node(n.id.as_str()) {
                Some(l) if l.kind == NodeKind::DeIdentify => frontier += 1,
                Some(_) => return Err(PrivacyError::FrontierMismatch(format!("`{}` is not a de-identify activity locally", n.id))),
                None => return Err(PrivacyError::FrontierMismatch(format!("`{}` is not a local boundary", n.id))),
            }
            continue;
        }
        match local.node(n.id.as_str()) {
            Some(l) if l.same_content(n) => {}
            Some(_) => return Err(PrivacyError::ConflictingNode(n.id.to_string())),
            None => {
                merged.restore_node(n.clone())?;
            }
        }
    }
    if frontier == 0 {
        return Err(PrivacyError::FrontierMismatch("document has no frontier nodes".into()));
    }
    for (p, uri) in ext.namespaces() {
        if !merged.namespaces().contains_key(p) {
            merged.declare_namespace(p.clone(), uri.clone());
        }
    }
    for e in ext.edges() {
        merged.add_edge(e.clone())?;
    }
    Ok(merged)
}

pub fn merge_external_text(local: &ProvGraph, text: &str) -> Result<ProvGraph, PrivacyError> {
    merge_external(local, &ProvDocument::parse(text)?)
}
