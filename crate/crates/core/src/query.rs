//! Influence queries over a provenance graph.
//!
//! Traversal follows edges in dependency direction (from a node to what it
//! depends on). Depth is counted in activities only: entities and agents are
//! free, so an agent sits at the depth of the activity it is associated with.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ConnectionClass, NodeId, NodeKind, ProvEdge, ProvGraph, ProvNode, Relation, TopLevel};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("`{0}` is not a goal state")]
    NotAGoal(String),
    #[error("`{0}` is not a metric")]
    NotAMetric(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFilter {
    /// Kinds kept in the answer. Filters prune the answer, not the traversal.
    #[serde(default)]
    pub node_kinds: Option<BTreeSet<NodeKind>>,
    #[serde(default)]
    pub max_activity_depth: Option<u32>,
    #[serde(default = "default_true")]
    pub stop_at_reset: bool,
    /// Edges traversed; unclassified edges only match when this is `None`.
    #[serde(default)]
    pub connection_classes: Option<BTreeSet<ConnectionClass>>,
}

fn default_true() -> bool {
    true
}

impl Default for QueryFilter {
    fn default() -> Self {
        QueryFilter { node_kinds: None, max_activity_depth: None, stop_at_reset: true, connection_classes: None }
    }
}

impl QueryFilter {
    pub fn kinds(mut self, kinds: impl IntoIterator<Item = NodeKind>) -> Self {
        self.node_kinds = Some(kinds.into_iter().collect());
        self
    }

    pub fn depth(mut self, depth: u32) -> Self {
        self.max_activity_depth = Some(depth);
        self
    }

    pub fn crossing_resets(mut self) -> Self {
        self.stop_at_reset = false;
        self
    }

    pub fn classes(mut self, classes: impl IntoIterator<Item = ConnectionClass>) -> Self {
        self.connection_classes = Some(classes.into_iter().collect());
        self
    }

    fn admits_edge(&self, edge: &ProvEdge) -> bool {
        match &self.connection_classes {
            None => true,
            Some(set) => edge.kind.connection.is_some_and(|c| set.contains(&c)),
        }
    }
}

fn activity_cost(node: &ProvNode) -> u32 {
    u32::from(node.kind.top_level() == TopLevel::Activity)
}

/// Minimal activity depth of every node reachable from `target` within the
/// filter's depth limit and reset scope. Node kinds are ignored here.
pub fn influence_depths(
    graph: &ProvGraph,
    target: &str,
    filter: &QueryFilter,
) -> Result<BTreeMap<NodeId, u32>, QueryError> {
    let start = graph.node(target).ok_or_else(|| QueryError::UnknownNode(target.to_string()))?;
    let scope = if filter.stop_at_reset { start.attr("chain") } else { None };
    let limit = filter.max_activity_depth.unwrap_or(u32::MAX);

    let mut depth: BTreeMap<NodeId, u32> = BTreeMap::new();
    let d0 = activity_cost(start);
    if d0 > limit {
        // the target itself is always part of the answer
        depth.insert(start.id.clone(), d0);
        return Ok(depth);
    }
    // 0-1 BFS: entering an activity costs 1, anything else 0
    let mut queue: VecDeque<(&NodeId, u32)> = VecDeque::new();
    depth.insert(start.id.clone(), d0);
    queue.push_back((&start.id, d0));
    while let Some((id, d)) = queue.pop_front() {
        if depth.get(id).is_some_and(|&best| best < d) {
            continue;
        }
        for edge in graph.out_edges(id.as_str()) {
            if !filter.admits_edge(edge) {
                continue;
            }
            let Some(next) = graph.node(edge.dst.as_str()) else { continue };
            if let (Some(scope), Some(chain)) = (scope, next.attr("chain")) {
                if chain != scope {
                    continue;
                }
            }
            let cost = activity_cost(next);
            let nd = d + cost;
            if nd > limit {
                continue;
            }
            if depth.get(&next.id).is_none_or(|&best| nd < best) {
                depth.insert(next.id.clone(), nd);
                if cost == 0 {
                    queue.push_front((&next.id, nd));
                } else {
                    queue.push_back((&next.id, nd));
                }
            }
        }
    }
    Ok(depth)
}

/// Induced subgraph of everything `target` depends on, pruned by `filter`.
/// The target is always part of the result.
pub fn trace_influences(graph: &ProvGraph, target: &str, filter: &QueryFilter) -> Result<ProvGraph, QueryError> {
    let depths = influence_depths(graph, target, filter)?;
    let keep: Vec<&NodeId> = depths
        .keys()
        .filter(|id| {
            id.as_str() == target
                || filter
                    .node_kinds
                    .as_ref()
                    .is_none_or(|kinds| kinds.contains(&graph.node(id.as_str()).expect("reached").kind))
        })
        .collect();
    Ok(graph.subgraph(keep).expect("ids come from the graph"))
}

/// Timestamp used to order answers: the node's own `ts_ms`, or for agents the
/// latest activity in `reached` they are associated with.
fn sort_ts(reached: &ProvGraph, source: &ProvGraph, node: &ProvNode) -> Option<i64> {
    if let Some(ts) = node.ts_ms() {
        return Some(ts);
    }
    if node.kind.top_level() != TopLevel::Agent {
        return None;
    }
    source
        .in_edges(node.id.as_str())
        .filter(|e| e.kind.relation == Relation::WasAssociatedWith)
        .filter_map(|e| source.node(e.src.as_str()))
        .filter(|act| reached.contains(act.id.as_str()))
        .filter_map(ProvNode::ts_ms)
        .max()
}

/// Ordered node ids of `trace_influences`, where agents are ordered by the
/// activities they performed within the traversal (even if the activities
/// themselves are filtered out of the answer).
pub fn trace_listing(graph: &ProvGraph, target: &str, filter: &QueryFilter) -> Result<Vec<NodeId>, QueryError> {
    let answer = trace_influences(graph, target, filter)?;
    let reached = trace_influences(graph, target, &QueryFilter { node_kinds: None, ..filter.clone() })?;
    let mut ids: Vec<(Option<i64>, NodeId)> = answer
        .nodes()
        .map(|n| (sort_ts(&reached, graph, n), n.id.clone()))
        .collect();
    ids.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    Ok(ids.into_iter().map(|(_, id)| id).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalAssists {
    pub scorer: Option<String>,
    /// Contributing players other than the scorer, latest action first.
    pub assists: Vec<String>,
}

/// Players whose actions lie within two activities upstream of a goal.
pub fn goal_assists(graph: &ProvGraph, goal: &str) -> Result<GoalAssists, QueryError> {
    let node = graph.node(goal).ok_or_else(|| QueryError::UnknownNode(goal.to_string()))?;
    if node.kind != NodeKind::PhysicalGameState || node.attr("score_type") != Some("goal") {
        return Err(QueryError::NotAGoal(goal.to_string()));
    }
    let depths = influence_depths(graph, goal, &QueryFilter::default().depth(2))?;
    // player -> (min depth, latest ts) over associated activities
    let mut players: BTreeMap<&NodeId, (u32, Option<i64>)> = BTreeMap::new();
    for (id, &d) in &depths {
        let act = graph.node(id.as_str()).expect("reached");
        if act.kind.top_level() != TopLevel::Activity || d == 0 {
            continue;
        }
        for agent in graph.associated_agents(id.as_str()) {
            if graph.node(agent.as_str()).is_some_and(|a| a.kind == NodeKind::Player) {
                let entry = players.entry(agent).or_insert((d, act.ts_ms()));
                entry.0 = entry.0.min(d);
                entry.1 = entry.1.max(act.ts_ms());
            }
        }
    }
    let scorer = node
        .attr("scorer")
        .map(str::to_string)
        .or_else(|| players.iter().find(|(_, (d, _))| *d == 1).map(|(p, _)| p.to_string()));
    let mut assists: Vec<(Option<i64>, &NodeId)> = players
        .iter()
        .filter(|(p, _)| Some(p.as_str()) != scorer.as_deref())
        .map(|(p, (_, ts))| (*ts, *p))
        .collect();
    assists.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(GoalAssists { scorer, assists: assists.into_iter().map(|(_, p)| p.to_string()).collect() })
}

/// A game event backing a node, resolved to its video segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRef {
    pub event_id: String,
    pub node_id: String,
    pub kind: Option<String>,
    pub ts_ms: Option<i64>,
    pub video_ref: String,
    pub start_ms: i64,
    pub end_ms: i64,
}

/// Game events upstream of a metric, one entry per event, latest first.
pub fn drill_down(graph: &ProvGraph, metric: &str) -> Result<Vec<ClipRef>, QueryError> {
    let node = graph.node(metric).ok_or_else(|| QueryError::UnknownNode(metric.to_string()))?;
    if node.kind != NodeKind::Metric {
        return Err(QueryError::NotAMetric(metric.to_string()));
    }
    let answer = trace_influences(graph, metric, &QueryFilter::default())?;
    let mut by_event: BTreeMap<String, &ProvNode> = BTreeMap::new();
    for n in answer.nodes() {
        let (Some(event_id), Some(_)) = (n.attr("event_id"), n.attr("video_ref")) else { continue };
        // prefer the state node, whose id is the event id
        let replace = match by_event.get(event_id) {
            None => true,
            Some(cur) => cur.id.as_str() != event_id && n.id.as_str() == event_id,
        };
        if replace {
            by_event.insert(event_id.to_string(), n);
        }
    }
    let mut clips: Vec<ClipRef> = by_event
        .into_iter()
        .map(|(event_id, n)| {
            let ts = n.ts_ms();
            let start = n.attr("start_ms").and_then(|v| v.parse().ok()).or(ts).unwrap_or(0);
            let end = n.attr("end_ms").and_then(|v| v.parse().ok()).unwrap_or(start);
            ClipRef {
                event_id,
                node_id: n.id.to_string(),
                kind: n.attr("kind").map(str::to_string),
                ts_ms: ts,
                video_ref: n.attr("video_ref").unwrap_or_default().to_string(),
                start_ms: start,
                end_ms: end,
            }
        })
        .collect();
    clips.sort_by(|a, b| b.ts_ms.cmp(&a.ts_ms).then_with(|| a.event_id.cmp(&b.event_id)));
    Ok(clips)
}
