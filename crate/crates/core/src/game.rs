//! Physical game provenance: turns a stream of timeline annotations into
//! possession chains of game states, actions and players.
//!
//! Every tap, kick or mark becomes a `GameAction` activity that used the
//! current game state and generated a new one. A centre bounce is an activity
//! that generates a fresh origin state with no link to the previous chain.
//! Goals and behinds are scoring states generated by the last action of the
//! chain and close it. Injuries and wind gusts branch off the main line.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    EdgeKind, GraphDelta, GraphError, NodeId, NodeKind, ProvEdge, ProvGraph, ProvNode, Relation,
    RESERVED_ATTR_KEYS,
};

/// Default clip window around an event when the annotation carries none.
pub const CLIP_LEAD_MS: i64 = 3000;
pub const CLIP_TAIL_MS: i64 = 2000;

/// Node attribute keys written by ingest; event attrs may not shadow them.
const OWN_KEYS: [&str; 14] = [
    "event_id", "ts_ms", "kind", "video_ref", "chain", "start_ms", "end_ms", "player", "target_player",
    "origin", "score_type", "scorer", "branch", "game",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GameError {
    #[error("event at {ts_ms} ms arrives after {last_ts_ms} ms (`{event_id}` after `{last_event_id}`)")]
    OutOfOrderEvent { event_id: String, ts_ms: i64, last_event_id: String, last_ts_ms: i64 },
    #[error("player `{0}` is not in the roster")]
    UnknownPlayer(String),
    #[error("no open possession chain")]
    NoOpenChain,
    #[error("invalid event `{event_id}`: {reason}")]
    InvalidEvent { event_id: String, reason: String },
    #[error("invalid interval [{from_ts}, {to_ts})")]
    InvalidInterval { from_ts: i64, to_ts: i64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    CentreBounce,
    Tap,
    Kick,
    Mark,
    Goal,
    Behind,
    Injury,
    WindGust,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::CentreBounce => "centre_bounce",
            EventKind::Tap => "tap",
            EventKind::Kick => "kick",
            EventKind::Mark => "mark",
            EventKind::Goal => "goal",
            EventKind::Behind => "behind",
            EventKind::Injury => "injury",
            EventKind::WindGust => "wind_gust",
        }
    }

    pub fn parse(s: &str) -> Option<EventKind> {
        use EventKind::*;
        [CentreBounce, Tap, Kick, Mark, Goal, Behind, Injury, WindGust]
            .into_iter()
            .find(|k| k.as_str() == s)
    }

    pub fn requires_player(self) -> bool {
        !matches!(self, EventKind::CentreBounce | EventKind::WindGust)
    }

    /// Ball-moving actions that become activities.
    pub fn is_action(self) -> bool {
        matches!(self, EventKind::Tap | EventKind::Kick | EventKind::Mark)
    }

    pub fn is_score(self) -> bool {
        matches!(self, EventKind::Goal | EventKind::Behind)
    }
}

/// One timeline annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameEvent {
    pub event_id: String,
    pub ts_ms: i64,
    pub kind: EventKind,
    #[serde(default)]
    pub player: Option<String>,
    #[serde(default)]
    pub target_player: Option<String>,
    pub video_ref: String,
    #[serde(default, deserialize_with = "scalar_map")]
    pub attrs: BTreeMap<String, String>,
}

/// Attribute values may be written as JSON strings, numbers or booleans.
fn scalar_map<'de, D: serde::Deserializer<'de>>(d: D) -> Result<BTreeMap<String, String>, D::Error> {
    use serde::de::Error;
    let raw: Option<BTreeMap<String, serde_json::Value>> = Option::deserialize(d)?;
    raw.unwrap_or_default()
        .into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::String(s) => Ok((k, s)),
            serde_json::Value::Number(n) => Ok((k, n.to_string())),
            serde_json::Value::Bool(b) => Ok((k, b.to_string())),
            other => Err(D::Error::custom(format!("attribute `{k}` must be a scalar, got {other}"))),
        })
        .collect()
}

impl GameEvent {
    pub fn new(event_id: impl Into<String>, ts_ms: i64, kind: EventKind, player: Option<&str>) -> Self {
        GameEvent {
            event_id: event_id.into(),
            ts_ms,
            kind,
            player: player.map(str::to_string),
            target_player: None,
            video_ref: "game.mp4".into(),
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: &str) -> Self {
        self.attrs.insert(key.into(), value.into());
        self
    }

    pub fn with_target(mut self, target: &str) -> Self {
        self.target_player = Some(target.into());
        self
    }

    pub fn with_video(mut self, video_ref: &str) -> Self {
        self.video_ref = video_ref.into();
        self
    }

    pub fn validate(&self) -> Result<(), GameError> {
        let invalid = |reason: &str| GameError::InvalidEvent { event_id: self.event_id.clone(), reason: reason.into() };
        if !NodeId::is_valid(&self.event_id) {
            return Err(invalid("event_id must match [A-Za-z0-9_.%-]+"));
        }
        if self.event_id.ends_with(".act") {
            return Err(invalid("event_id may not end in `.act`"));
        }
        if self.ts_ms < 0 {
            return Err(invalid("ts_ms must be >= 0"));
        }
        if self.kind.requires_player() && self.player.is_none() {
            return Err(invalid("player required"));
        }
        if self.kind == EventKind::Injury && !self.attrs.contains_key("body_part") {
            return Err(invalid("injury requires attrs.body_part"));
        }
        for key in self.attrs.keys() {
            let plain = key.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && key.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'));
            if !plain || RESERVED_ATTR_KEYS.contains(&key.as_str()) || OWN_KEYS.contains(&key.as_str()) {
                return Err(invalid(&format!("attribute key `{key}` is not allowed")));
            }
        }
        Ok(())
    }

    pub fn players(&self) -> impl Iterator<Item = &str> {
        self.player.iter().chain(self.target_player.iter()).map(String::as_str)
    }

    /// Video segment for this event.
    pub fn clip(&self) -> (i64, i64) {
        let start = self
            .attrs
            .get("clip_start_ms")
            .and_then(|v| v.parse().ok())
            .unwrap_or((self.ts_ms - CLIP_LEAD_MS).max(0));
        let end = self
            .attrs
            .get("clip_end_ms")
            .and_then(|v| v.parse().ok())
            .unwrap_or(self.ts_ms + CLIP_TAIL_MS);
        (start, end.max(start))
    }

    /// Stream ordering key: timestamp, then event id.
    pub fn order_key(&self) -> (i64, &str) {
        (self.ts_ms, &self.event_id)
    }
}

/// Parse a JSON Lines event file. Blank lines are ignored.
pub fn read_events_jsonl(text: &str) -> Result<Vec<GameEvent>, GameError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<GameEvent>(l).map_err(|e| GameError::Parse { line: i + 1, message: e.to_string() })
        })
        .collect()
}

pub fn write_events_jsonl(events: &[GameEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&serde_json::to_string(ev).expect("events serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Goal,
    Behind,
    Turnover,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PossessionChain {
    pub chain_id: String,
    pub start_event: String,
    pub events: Vec<String>,
    pub terminal: Option<Terminal>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayerInfo {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub team: Option<String>,
}

/// Known players. An open roster admits any player on first reference.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    pub players: BTreeMap<String, PlayerInfo>,
    #[serde(default)]
    pub open: bool,
}

impl Roster {
    pub fn open() -> Self {
        Roster { players: BTreeMap::new(), open: true }
    }

    pub fn closed<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        Roster { players: ids.into_iter().map(|id| (id.to_string(), PlayerInfo::default())).collect(), open: false }
    }

    pub fn admits(&self, player: &str) -> bool {
        self.open || self.players.contains_key(player)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct OpenChain {
    chain: PossessionChain,
    state: NodeId,
    last_activity: NodeId,
    pending_wind: Vec<NodeId>,
}

/// What one ingested event changed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub delta: GraphDelta,
    /// Chain finalized by this event, if any.
    pub closed: Option<PossessionChain>,
}

/// Per-game ingest state. One stream per game; not shared between threads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameIngest {
    game_id: String,
    roster: Roster,
    last: Option<(i64, String)>,
    open: Option<OpenChain>,
    closed: Vec<PossessionChain>,
    /// Latest main-line state and its chain, open or not.
    latest_state: Option<(NodeId, String)>,
    events: Vec<GameEvent>,
}

impl GameIngest {
    pub fn new(game_id: impl Into<String>, roster: Roster) -> Self {
        GameIngest {
            game_id: game_id.into(),
            roster,
            last: None,
            open: None,
            closed: Vec::new(),
            latest_state: None,
            events: Vec::new(),
        }
    }

    pub fn game_id(&self) -> &str {
        &self.game_id
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    /// Events accepted so far, in ingest order.
    pub fn events(&self) -> &[GameEvent] {
        &self.events
    }

    pub fn last_ts(&self) -> Option<i64> {
        self.last.as_ref().map(|(ts, _)| *ts)
    }

    /// Finalized chains followed by the open one, if any.
    pub fn chains(&self) -> Vec<PossessionChain> {
        let mut out = self.closed.clone();
        if let Some(open) = &self.open {
            out.push(open.chain.clone());
        }
        out
    }

    pub fn closed_chains(&self) -> &[PossessionChain] {
        &self.closed
    }

    pub fn open_chain(&self) -> Option<&PossessionChain> {
        self.open.as_ref().map(|o| &o.chain)
    }

    /// Finalize the open chain as a reset. Later actions need a new bounce.
    pub fn close_chain(&mut self) -> Result<PossessionChain, GameError> {
        self.close_with(Terminal::Reset)
    }

    fn close_with(&mut self, terminal: Terminal) -> Result<PossessionChain, GameError> {
        let mut open = self.open.take().ok_or(GameError::NoOpenChain)?;
        open.chain.terminal = Some(terminal);
        self.closed.push(open.chain.clone());
        Ok(open.chain)
    }

    /// Ingest one event into `graph`. The graph and the state are left
    /// unchanged when an error is returned.
    pub fn ingest(&mut self, graph: &mut ProvGraph, ev: &GameEvent) -> Result<IngestOutcome, GameError> {
        ev.validate()?;
        if let Some((ts, id)) = &self.last {
            if (ev.ts_ms, ev.event_id.as_str()) <= (*ts, id.as_str()) {
                return Err(GameError::OutOfOrderEvent {
                    event_id: ev.event_id.clone(),
                    ts_ms: ev.ts_ms,
                    last_event_id: id.clone(),
                    last_ts_ms: *ts,
                });
            }
        }
        for p in ev.players() {
            if !self.roster.admits(p) {
                return Err(GameError::UnknownPlayer(p.to_string()));
            }
            if !NodeId::is_valid(p) {
                return Err(GameError::InvalidEvent {
                    event_id: ev.event_id.clone(),
                    reason: format!("player id `{p}` must match [A-Za-z0-9_.%-]+"),
                });
            }
        }

        let mut delta = GraphDelta::default();
        let mut pending: BTreeSet<&str> = BTreeSet::new();
        for p in ev.players() {
            if !graph.contains(p) && pending.insert(p) {
                delta.nodes.push(self.player_node(p));
            }
        }

        let state_id = NodeId::new(ev.event_id.clone())?;
        let act_id = NodeId::new(format!("{}.act", ev.event_id))?;
        let phys = EdgeKind::physical;

        let next = match ev.kind {
            EventKind::CentreBounce => {
                let chain_id = ev.event_id.clone();
                delta.nodes.push(self.event_node(act_id.clone(), NodeKind::GameAction, ev, Some(&chain_id)));
                delta.nodes.push(
                    self.event_node(state_id.clone(), NodeKind::PhysicalGameState, ev, Some(&chain_id))
                        .with_attr("origin", "true"),
                );
                delta.edges.push(ProvEdge::new(state_id.clone(), act_id.clone(), phys(Relation::WasGeneratedBy)));
                Next::Open { chain_id, state: state_id, activity: act_id }
            }
            k if k.is_action() => {
                let open = self.open.as_ref().ok_or(GameError::NoOpenChain)?;
                let chain_id = open.chain.chain_id.clone();
                let player = NodeId::new(ev.player.clone().expect("validated"))?;
                delta.nodes.push(self.event_node(act_id.clone(), NodeKind::GameAction, ev, Some(&chain_id)));
                delta.nodes.push(self.event_node(state_id.clone(), NodeKind::PhysicalGameState, ev, Some(&chain_id)));
                delta.edges.push(ProvEdge::new(act_id.clone(), open.state.clone(), phys(Relation::Used)));
                delta.edges.push(ProvEdge::new(act_id.clone(), player, phys(Relation::WasAssociatedWith)));
                delta.edges.push(ProvEdge::new(state_id.clone(), act_id.clone(), phys(Relation::WasGeneratedBy)));
                for wind in &open.pending_wind {
                    delta.edges.push(ProvEdge::new(act_id.clone(), wind.clone(), phys(Relation::Used)));
                }
                Next::Advance { state: state_id, activity: act_id }
            }
            k if k.is_score() => {
                let open = self.open.as_ref().ok_or(GameError::NoOpenChain)?;
                let chain_id = open.chain.chain_id.clone();
                let scorer = ev.player.clone().expect("validated");
                delta.nodes.push(
                    self.event_node(state_id.clone(), NodeKind::PhysicalGameState, ev, Some(&chain_id))
                        .with_attr("score_type", k.as_str())
                        .with_attr("scorer", scorer),
                );
                delta.edges.push(ProvEdge::new(
                    state_id.clone(),
                    open.last_activity.clone(),
                    phys(Relation::WasGeneratedBy),
                ));
                Next::Score { state: state_id, terminal: if k == EventKind::Goal { Terminal::Goal } else { Terminal::Behind } }
            }
            EventKind::Injury => {
                let (concurrent, chain_id) = self.latest_state.clone().ok_or(GameError::NoOpenChain)?;
                delta.nodes.push(
                    self.event_node(state_id.clone(), NodeKind::PhysicalGameState, ev, Some(&chain_id))
                        .with_attr("branch", "injury"),
                );
                delta.edges.push(ProvEdge::new(state_id, concurrent, phys(Relation::WasDerivedFrom)));
                Next::Branch { influencing_wind: None }
            }
            EventKind::WindGust => {
                let chain_id = self.open.as_ref().map(|o| o.chain.chain_id.clone());
                delta.nodes.push(
                    self.event_node(state_id.clone(), NodeKind::PhysicalGameState, ev, chain_id.as_deref())
                        .with_attr("branch", "wind"),
                );
                let influencing = ev.attrs.get("influence").is_some_and(|v| v == "true") && self.open.is_some();
                Next::Branch { influencing_wind: influencing.then_some(state_id) }
            }
            _ => unreachable!("all event kinds covered"),
        };

        graph.apply_delta(&delta)?;

        self.last = Some((ev.ts_ms, ev.event_id.clone()));
        self.events.push(ev.clone());
        let mut closed = None;
        match next {
            Next::Open { chain_id, state, activity } => {
                if self.open.is_some() {
                    closed = Some(self.close_with(Terminal::Reset)?);
                }
                self.latest_state = Some((state.clone(), chain_id.clone()));
                self.open = Some(OpenChain {
                    chain: PossessionChain {
                        chain_id,
                        start_event: ev.event_id.clone(),
                        events: vec![ev.event_id.clone()],
                        terminal: None,
                    },
                    state,
                    last_activity: activity,
                    pending_wind: Vec::new(),
                });
            }
            Next::Advance { state, activity } => {
                let open = self.open.as_mut().expect("checked above");
                open.chain.events.push(ev.event_id.clone());
                open.pending_wind.clear();
                open.state = state.clone();
                open.last_activity = activity;
                self.latest_state = Some((state, open.chain.chain_id.clone()));
            }
            Next::Score { state, terminal } => {
                let open = self.open.as_mut().expect("checked above");
                open.chain.events.push(ev.event_id.clone());
                self.latest_state = Some((state, open.chain.chain_id.clone()));
                closed = Some(self.close_with(terminal)?);
            }
            Next::Branch { influencing_wind } => {
                if let (Some(wind), Some(open)) = (influencing_wind, self.open.as_mut()) {
                    open.pending_wind.push(wind);
                }
            }
        }
        Ok(IngestOutcome { delta, closed })
    }

    /// Ingest events in order, stopping at the first error.
    pub fn ingest_all<'a>(
        &mut self,
        graph: &mut ProvGraph,
        events: impl IntoIterator<Item = &'a GameEvent>,
    ) -> Result<GraphDelta, GameError> {
        let mut total = GraphDelta::default();
        for ev in events {
            total.extend(self.ingest(graph, ev)?.delta);
        }
        Ok(total)
    }

    fn player_node(&self, player: &str) -> ProvNode {
        let info = self.roster.players.get(player);
        let label = info.and_then(|i| i.name.clone()).unwrap_or_else(|| player.to_string());
        let mut node = ProvNode::new(NodeId::sanitized(player), NodeKind::Player, label);
        if let Some(team) = info.and_then(|i| i.team.clone()) {
            node.attrs.insert("team".into(), team);
        }
        node
    }

    fn event_node(&self, id: NodeId, kind: NodeKind, ev: &GameEvent, chain: Option<&str>) -> ProvNode {
        let mut node = ProvNode::new(id, kind, ev.kind.as_str());
        node.attrs.extend(ev.attrs.iter().map(|(k, v)| (k.clone(), v.clone())));
        let (start, end) = ev.clip();
        node.attrs.insert("event_id".into(), ev.event_id.clone());
        node.attrs.insert("kind".into(), ev.kind.as_str().into());
        node.attrs.insert("ts_ms".into(), ev.ts_ms.to_string());
        node.attrs.insert("video_ref".into(), ev.video_ref.clone());
        node.attrs.insert("start_ms".into(), start.to_string());
        node.attrs.insert("end_ms".into(), end.to_string());
        node.attrs.insert("game".into(), self.game_id.clone());
        if let Some(p) = &ev.player {
            node.attrs.insert("player".into(), p.clone());
        }
        if let Some(p) = &ev.target_player {
            node.attrs.insert("target_player".into(), p.clone());
        }
        if let Some(c) = chain {
            node.attrs.insert("chain".into(), c.to_string());
        }
        node
    }
}

enum Next {
    Open { chain_id: String, state: NodeId, activity: NodeId },
    Advance { state: NodeId, activity: NodeId },
    Score { state: NodeId, terminal: Terminal },
    Branch { influencing_wind: Option<NodeId> },
}

/// Id of the role agent for a role name.
pub fn role_node_id(role: &str) -> NodeId {
    NodeId::sanitized(&format!("role.{role}"))
}

/// Bind a player to a role for `[from_ts, to_ts)`; an absent `to_ts` is
/// open-ended. Missing player and role agents are created.
pub fn roster_bind(
    graph: &mut ProvGraph,
    player: &str,
    role: &str,
    from_ts: i64,
    to_ts: Option<i64>,
) -> Result<GraphDelta, GameError> {
    if let Some(to) = to_ts {
        if from_ts >= to {
            return Err(GameError::InvalidInterval { from_ts, to_ts: to });
        }
    }
    let player_id = NodeId::new(player)?;
    let role_id = role_node_id(role);
    let mut delta = GraphDelta::default();
    if !graph.contains(player_id.as_str()) {
        delta.nodes.push(ProvNode::new(player_id.clone(), NodeKind::Player, player));
    }
    if !graph.contains(role_id.as_str()) {
        delta.nodes.push(ProvNode::new(role_id.clone(), NodeKind::PlayerRole, role));
    }
    let mut edge = ProvEdge::new(player_id, role_id, EdgeKind::physical(Relation::ActedOnBehalfOf))
        .with_attr("from_ms", from_ts.to_string());
    if let Some(to) = to_ts {
        edge = edge.with_attr("to_ms", to.to_string());
    }
    delta.edges.push(edge);
    graph.apply_delta(&delta)?;
    Ok(delta)
}

/// Validity interval of an `actedOnBehalfOf` edge written by [`roster_bind`].
pub fn binding_interval(edge: &ProvEdge) -> Option<(i64, Option<i64>)> {
    let from = edge.attrs.get("from_ms")?.parse().ok()?;
    let to = edge.attrs.get("to_ms").and_then(|v| v.parse().ok());
    Some((from, to))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn goal_fixture() -> Vec<GameEvent> {
        vec![
            GameEvent::new("bounce_1", 0, EventKind::CentreBounce, None),
            GameEvent::new("tap_1", 2, EventKind::Tap, Some("P3")).with_target("P12"),
            GameEvent::new("kick_1", 10, EventKind::Kick, Some("P12")).with_target("P7"),
            GameEvent::new("kick_2", 18, EventKind::Kick, Some("P7")),
            GameEvent::new("goal_1", 20, EventKind::Goal, Some("P7")),
        ]
    }

    fn ingest(events: &[GameEvent]) -> (ProvGraph, GameIngest) {
        let mut g = ProvGraph::new();
        let mut st = GameIngest::new("g1", Roster::closed(["P3", "P7", "P12"]));
        st.ingest_all(&mut g, events).unwrap();
        (g, st)
    }

    #[test]
    fn goal_chain_counts() {
        let (g, st) = ingest(&goal_fixture());
        let chains = st.chains();
        assert_eq!(chains.len(), 1);
        assert_eq!(chains[0].events.len(), 5);
        assert_eq!(chains[0].terminal, Some(Terminal::Goal));
        let count = |k| g.nodes().filter(|n| n.kind == k).count();
        assert_eq!(count(NodeKind::GameAction), 4);
        assert_eq!(count(NodeKind::PhysicalGameState), 5);
        assert_eq!(count(NodeKind::Player), 3);
        assert!(g.validate().is_empty());
    }

    #[test]
    fn out_of_order_rejected_without_side_effects() {
        let mut g = ProvGraph::new();
        let mut st = GameIngest::new("g1", Roster::open());
        st.ingest(&mut g, &GameEvent::new("b", 0, EventKind::CentreBounce, None)).unwrap();
        st.ingest(&mut g, &GameEvent::new("k", 10, EventKind::Kick, Some("P12"))).unwrap();
        let before = (g.clone(), st.clone());
        let err = st.ingest(&mut g, &GameEvent::new("t", 4, EventKind::Tap, Some("P3"))).unwrap_err();
        assert!(matches!(err, GameError::OutOfOrderEvent { ts_ms: 4, last_ts_ms: 10, .. }));
        assert_eq!((g, st), before);
    }

    #[test]
    fn ties_broken_by_event_id() {
        let mut g = ProvGraph::new();
        let mut st = GameIngest::new("g1", Roster::open());
        st.ingest(&mut g, &GameEvent::new("b", 0, EventKind::CentreBounce, None)).unwrap();
        st.ingest(&mut g, &GameEvent::new("k2", 5, EventKind::Kick, Some("P1"))).unwrap();
        assert!(st.ingest(&mut g, &GameEvent::new("k1", 5, EventKind::Kick, Some("P2"))).is_err());
        st.ingest(&mut g, &GameEvent::new("k3", 5, EventKind::Kick, Some("P2"))).unwrap();
    }

    #[test]
    fn unknown_player_and_no_open_chain() {
        let mut g = ProvGraph::new();
        let mut st = GameIngest::new("g1", Roster::closed(["P3"]));
        assert_eq!(
            st.ingest(&mut g, &GameEvent::new("t", 0, EventKind::Tap, Some("P3"))).unwrap_err(),
            GameError::NoOpenChain
        );
        st.ingest(&mut g, &GameEvent::new("b", 1, EventKind::CentreBounce, None)).unwrap();
        assert_eq!(
            st.ingest(&mut g, &GameEvent::new("t", 2, EventKind::Tap, Some("P99"))).unwrap_err(),
            GameError::UnknownPlayer("P99".into())
        );
    }

    #[test]
    fn injury_branches_off_post_tap_state() {
        let mut events = goal_fixture();
        events.insert(2, GameEvent::new("inj_1", 5, EventKind::Injury, Some("P3")).with_attr("body_part", "knee"));
        let (g, st) = ingest(&events);
        let inj = g.node("inj_1").unwrap();
        assert_eq!(inj.attr("branch"), Some("injury"));
        let parents: Vec<_> = g.out_edges("inj_1").map(|e| e.dst.as_str()).collect();
        assert_eq!(parents, vec!["tap_1"]);
        assert!(!st.chains()[0].events.contains(&"inj_1".to_string()));
    }

    #[test]
    fn injury_requires_body_part() {
        let ev = GameEvent::new("i", 5, EventKind::Injury, Some("P3"));
        assert!(matches!(ev.validate(), Err(GameError::InvalidEvent { .. })));
    }

    #[test]
    fn bounce_after_goal_opens_new_chain() {
        let mut events = goal_fixture();
        events.push(GameEvent::new("bounce_2", 40, EventKind::CentreBounce, None));
        let (_, st) = ingest(&events);
        let chains = st.chains();
        assert_eq!(chains.len(), 2);
        assert_eq!(chains[0].terminal, Some(Terminal::Goal));
        assert_eq!(chains[1].terminal, None);
        assert_eq!(st.open_chain().unwrap().start_event, "bounce_2");
    }

    #[test]
    fn bounce_without_score_resets() {
        let events = vec![
            GameEvent::new("b1", 0, EventKind::CentreBounce, None),
            GameEvent::new("b2", 40, EventKind::CentreBounce, None),
        ];
        let (_, st) = ingest(&events);
        assert_eq!(st.closed_chains()[0].terminal, Some(Terminal::Reset));
    }

    #[test]
    fn close_chain_without_open_chain() {
        let mut st = GameIngest::new("g1", Roster::open());
        assert_eq!(st.close_chain().unwrap_err(), GameError::NoOpenChain);
    }

    #[test]
    fn actions_after_goal_need_a_bounce() {
        let mut events = goal_fixture();
        events.push(GameEvent::new("kick_3", 30, EventKind::Kick, Some("P3")));
        let mut g = ProvGraph::new();
        let mut st = GameIngest::new("g1", Roster::open());
        assert_eq!(st.ingest_all(&mut g, &events).unwrap_err(), GameError::NoOpenChain);
    }

    #[test]
    fn influencing_wind_feeds_next_action_only() {
        let events = vec![
            GameEvent::new("b", 0, EventKind::CentreBounce, None),
            GameEvent::new("w1", 1, EventKind::WindGust, None).with_attr("influence", "true"),
            GameEvent::new("w2", 2, EventKind::WindGust, None),
            GameEvent::new("k1", 3, EventKind::Kick, Some("P1")),
            GameEvent::new("k2", 4, EventKind::Kick, Some("P2")),
        ];
        let mut g = ProvGraph::new();
        let mut st = GameIngest::new("g1", Roster::open());
        st.ingest_all(&mut g, &events).unwrap();
        let used = |a: &str| g.out_edges(a).filter(|e| e.relation() == Relation::Used).map(|e| e.dst.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(used("k1.act"), BTreeSet::from(["b".to_string(), "w1".to_string()]));
        assert_eq!(used("k2.act"), BTreeSet::from(["k1".to_string()]));
        assert_eq!(g.in_edges("w2").count() + g.out_edges("w2").count(), 0);
    }

    #[test]
    fn roster_bind_edges_and_intervals() {
        let mut g = ProvGraph::new();
        roster_bind(&mut g, "P7", "Half Forward", 0, None).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.node("role.Half_Forward").unwrap().label, "Half Forward");
        roster_bind(&mut g, "P3", "Ruck", 0, Some(3000)).unwrap();
        roster_bind(&mut g, "P3", "Bench", 3000, None).unwrap();
        let p3: Vec<_> = g.out_edges("P3").filter_map(binding_interval).collect();
        assert_eq!(p3.len(), 2);
        // half-open intervals [a,b) and [c,d) are disjoint iff b <= c or d <= a
        let disjoint = |(a, b): (i64, Option<i64>), (c, d): (i64, Option<i64>)| {
            b.is_some_and(|b| b <= c) || d.is_some_and(|d| d <= a)
        };
        assert!(disjoint(p3[0], p3[1]));
        assert_eq!(
            roster_bind(&mut g, "P3", "Ruck", 10, Some(5)).unwrap_err(),
            GameError::InvalidInterval { from_ts: 10, to_ts: 5 }
        );
    }

    #[test]
    fn jsonl_round_trip_with_scalar_attrs() {
        let text = r#"{"event_id":"w","ts_ms":5,"kind":"wind_gust","video_ref":"v.mp4","attrs":{"influence":true,"speed":42}}"#;
        let evs = read_events_jsonl(text).unwrap();
        assert_eq!(evs[0].attrs["influence"], "true");
        assert_eq!(evs[0].attrs["speed"], "42");
        let again = read_events_jsonl(&write_events_jsonl(&evs)).unwrap();
        assert_eq!(again, evs);
        assert!(matches!(read_events_jsonl("{nope").unwrap_err(), GameError::Parse { line: 1, .. }));
    }
}
