//! In-memory state behind the API and the CLI: one provenance graph shared
//! by all games and workflows, plus the push-message log.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use sportprov::game::{write_events_jsonl, GameEvent, GameIngest, PossessionChain, Roster};
use sportprov::graph::{NodeId, ProvEdge, ProvGraph, ProvNode};
use sportprov::privacy::{export_partial, merge_external_text};
use sportprov::query::{trace_influences, trace_listing, QueryFilter};
use sportprov::sprov::{serialize, ProvDocument};
use sportprov::table::Table;
use sportprov::workflow::{Engine, Override, PortType, RunReport, RunStatus, Value, WorkflowDef, WorkflowError};
use tokio::sync::broadcast;

use crate::error::ServiceError;

/// Messages kept for clients that reconnect with a sequence number.
pub const HISTORY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    EventIngested,
    MetricsUpdated,
    RunState,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::EventIngested => "event_ingested",
            MessageKind::MetricsUpdated => "metrics_updated",
            MessageKind::RunState => "run_state",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    pub kind: MessageKind,
    pub data: Json,
}

/// When a fed workflow is brought up to date with its game.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedPolicy {
    /// After each event that closes a possession chain, and on flush.
    #[default]
    ChainClose,
    EveryEvent,
}

/// Binds a workflow root input to the event log of a game.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feed {
    pub game: String,
    #[serde(default = "default_feed_input")]
    pub input: String,
    #[serde(default)]
    pub policy: FeedPolicy,
}

fn default_feed_input() -> String {
    "jsonl".to_string()
}

/// Every state change goes through one of these; the write-ahead log is a
/// sequence of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    Game {
        game: String,
        roster: Roster,
    },
    Event {
        game: String,
        event: GameEvent,
    },
    Flush {
        game: String,
    },
    Define {
        definition: WorkflowDef,
        #[serde(default)]
        inputs: BTreeMap<String, Value>,
        #[serde(default)]
        feed: Option<Feed>,
    },
    Inputs {
        workflow: String,
        inputs: BTreeMap<String, Value>,
    },
    Run {
        workflow: String,
        #[serde(default)]
        inputs: BTreeMap<String, Value>,
    },
    Recompute {
        workflow: String,
    },
    Manual {
        run: String,
        step: String,
        outputs: BTreeMap<String, Value>,
        author: String,
    },
    Override {
        workflow: String,
        #[serde(rename = "override")]
        ov: Override,
    },
    Edit {
        workflow: String,
        definition: WorkflowDef,
    },
    Rollback {
        workflow: String,
        version: u32,
    },
    Import {
        text: String,
    },
    Merge {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventReceipt {
    pub game: String,
    pub event_id: String,
    /// The same event was ingested before; nothing changed.
    pub duplicate: bool,
    pub nodes: Vec<NodeId>,
    pub edges: usize,
    pub closed_chain: Option<PossessionChain>,
    /// Runs triggered by this event.
    pub runs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainsView {
    pub game: String,
    pub closed: Vec<PossessionChain>,
    pub open: Option<PossessionChain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceAnswer {
    pub target: String,
    /// Answer nodes, most recent first.
    pub listing: Vec<NodeId>,
    pub nodes: Vec<ProvNode>,
    pub edges: Vec<ProvEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub workflow: String,
    pub run_id: Option<String>,
    pub version: Option<u32>,
    pub status: Option<RunStatus>,
    /// Inputs, overrides or the definition changed since the run shown.
    pub dirty: bool,
    /// The last metric slot in step order, usually the one to display.
    pub slot: Option<String>,
    pub table: Option<Table>,
    pub metrics: BTreeMap<String, Table>,
}

#[derive(Debug, Clone)]
struct Game {
    ingest: GameIngest,
    index: HashMap<String, usize>,
}

#[derive(Debug)]
pub struct Hub {
    graph: ProvGraph,
    games: BTreeMap<String, Game>,
    engine: Engine,
    feeds: BTreeMap<String, Feed>,
    seq: u64,
    history: VecDeque<Message>,
    tx: broadcast::Sender<Message>,
}

impl Default for Hub {
    fn default() -> Self {
        Hub::new()
    }
}

fn to_json<T: Serialize>(v: &T) -> Json {
    serde_json::to_value(v).expect("response types serialize")
}

impl Hub {
    pub fn new() -> Self {
        let (tx, _) = broadcast::channel(1024);
        Hub {
            graph: ProvGraph::new(),
            games: BTreeMap::new(),
            engine: Engine::new(),
            feeds: BTreeMap::new(),
            seq: 0,
            history: VecDeque::new(),
            tx,
        }
    }

    pub fn graph(&self) -> &ProvGraph {
        &self.graph
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Message> {
        self.tx.subscribe()
    }

    /// Retained messages with a sequence number above `seq`.
    pub fn history_since(&self, seq: u64) -> Vec<Message> {
        self.history.iter().filter(|m| m.seq > seq).cloned().collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.seq
    }

    fn publish(&mut self, kind: MessageKind, data: Json) {
        self.seq += 1;
        let msg = Message { seq: self.seq, kind, data };
        if self.history.len() == HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(msg.clone());
        // nobody listening is fine
        let _ = self.tx.send(msg);
    }

    pub fn apply(&mut self, cmd: Command) -> Result<Json, ServiceError> {
        match cmd {
            Command::Game { game, roster } => {
                match self.games.get(&game) {
                    Some(g) if g.ingest.roster() == &roster => {}
                    Some(_) => return Err(ServiceError::ConflictingGame(game)),
                    None => {
                        let ingest = GameIngest::new(game.clone(), roster);
                        self.games.insert(game.clone(), Game { ingest, index: HashMap::new() });
                    }
                }
                Ok(json!({ "game": game }))
            }
            Command::Event { game, event } => self.ingest(&game, event).map(|r| to_json(&r)),
            Command::Flush { game } => {
                if !self.games.contains_key(&game) {
                    return Err(ServiceError::UnknownGame(game));
                }
                let runs = self.refresh_game(&game, true)?;
                Ok(json!({ "game": game, "runs": runs }))
            }
            Command::Define { definition, inputs, feed } => {
                let wf = definition.workflow_id.clone();
                if self.engine.workflow_ids().any(|w| w == wf) {
                    return Err(WorkflowError::DuplicateWorkflow(wf).into());
                }
                // validate everything before the graph is touched
                let def = definition.normalized()?;
                if let Some(f) = &feed {
                    check_feed(&def, f)?;
                }
                let roots = def.roots();
                for (name, v) in &inputs {
                    let ty = roots.get(name).ok_or_else(|| WorkflowError::UnknownInput(name.clone()))?;
                    if !v.fits(*ty) {
                        return Err(ServiceError::BadRequest(format!("input `{name}` is not a {ty} value")));
                    }
                }
                let version = self.engine.define(&mut self.graph, def)?;
                self.engine.set_inputs(&mut self.graph, &wf, inputs)?;
                if let Some(f) = feed {
                    self.feeds.insert(wf.clone(), f);
                }
                Ok(json!({ "workflow": wf, "version": version }))
            }
            Command::Inputs { workflow, inputs } => {
                let changed = self.engine.set_inputs(&mut self.graph, &workflow, inputs)?;
                Ok(json!({ "workflow": workflow, "changed": changed }))
            }
            Command::Run { workflow, inputs } => {
                let report = self.engine.execute(&mut self.graph, &workflow, inputs)?;
                self.announce(&report);
                Ok(to_json(&report))
            }
            Command::Recompute { workflow } => {
                let report = self.engine.recompute_dirty(&mut self.graph, &workflow)?;
                self.announce(&report);
                Ok(to_json(&report))
            }
            Command::Manual { run, step, outputs, author } => {
                let report = self.engine.resolve_manual(&mut self.graph, &run, &step, outputs, &author)?;
                self.announce(&report);
                Ok(to_json(&report))
            }
            Command::Override { workflow, ov } => {
                let receipt = self.engine.apply_override(&mut self.graph, &workflow, ov)?;
                Ok(to_json(&receipt))
            }
            Command::Edit { workflow, definition } => {
                if definition.workflow_id != workflow {
                    return Err(ServiceError::BadRequest(format!(
                        "definition is for `{}`, not `{workflow}`",
                        definition.workflow_id
                    )));
                }
                if let Some(f) = self.feeds.get(&workflow) {
                    check_feed(&definition, f)?;
                }
                let version = self.engine.edit(&mut self.graph, &workflow, definition)?;
                Ok(json!({ "workflow": workflow, "version": version }))
            }
            Command::Rollback { workflow, version } => {
                if let Some(f) = self.feeds.get(&workflow) {
                    check_feed(self.engine.definition_at(&workflow, version)?, f)?;
                }
                let version = self.engine.rollback(&workflow, version)?;
                Ok(json!({ "workflow": workflow, "version": version }))
            }
            Command::Import { text } => {
                let before = (self.graph.node_count(), self.graph.edge_count());
                self.import(&text)?;
                Ok(json!({
                    "nodes": self.graph.node_count() - before.0,
                    "edges": self.graph.edge_count() - before.1,
                }))
            }
            Command::Merge { text } => {
                let before = (self.graph.node_count(), self.graph.edge_count());
                self.graph = merge_external_text(&self.graph, &text)?;
                Ok(json!({
                    "nodes": self.graph.node_count() - before.0,
                    "edges": self.graph.edge_count() - before.1,
                }))
            }
        }
    }

    fn ingest(&mut self, game_id: &str, event: GameEvent) -> Result<EventReceipt, ServiceError> {
        let game = self
            .games
            .entry(game_id.to_string())
            .or_insert_with(|| Game { ingest: GameIngest::new(game_id, Roster::open()), index: HashMap::new() });
        if let Some(&i) = game.index.get(&event.event_id) {
            if game.ingest.events()[i] != event {
                return Err(ServiceError::ConflictingEvent(event.event_id));
            }
            return Ok(EventReceipt {
                game: game_id.to_string(),
                event_id: event.event_id,
                duplicate: true,
                nodes: Vec::new(),
                edges: 0,
                closed_chain: None,
                runs: Vec::new(),
            });
        }
        let outcome = game.ingest.ingest(&mut self.graph, &event)?;
        game.index.insert(event.event_id.clone(), game.ingest.events().len() - 1);
        let mut receipt = EventReceipt {
            game: game_id.to_string(),
            event_id: event.event_id.clone(),
            duplicate: false,
            nodes: outcome.delta.nodes.iter().map(|n| n.id.clone()).collect(),
            edges: outcome.delta.edges.len(),
            closed_chain: outcome.closed.clone(),
            runs: Vec::new(),
        };
        self.publish(
            MessageKind::EventIngested,
            json!({
                "game": game_id,
                "event_id": event.event_id,
                "kind": event.kind,
                "ts_ms": event.ts_ms,
                "nodes": receipt.nodes.len(),
                "edges": receipt.edges,
                "closed_chain": outcome.closed.as_ref().map(|c| &c.chain_id),
            }),
        );
        receipt.runs = self.refresh_game(game_id, outcome.closed.is_some())?;
        Ok(receipt)
    }

    /// Bring workflows fed by `game` up to date. `boundary` is true when a
    /// chain just closed or a flush was asked for.
    fn refresh_game(&mut self, game: &str, boundary: bool) -> Result<Vec<String>, ServiceError> {
        let due: Vec<(String, Feed)> = self
            .feeds
            .iter()
            .filter(|(_, f)| f.game == game && (boundary || f.policy == FeedPolicy::EveryEvent))
            .map(|(w, f)| (w.clone(), f.clone()))
            .collect();
        let mut runs = Vec::new();
        for (wf, feed) in due {
            let events = self.games[game].ingest.events();
            let value = match self.engine.definition(&wf)?.roots().get(&feed.input) {
                Some(PortType::Str) => Value::Str(write_events_jsonl(events)),
                _ => Value::Table(Table::from_events(events)),
            };
            self.engine.set_inputs(&mut self.graph, &wf, BTreeMap::from([(feed.input.clone(), value)]))?;
            if !self.engine.is_dirty(&wf)? {
                continue;
            }
            match self.engine.recompute_dirty(&mut self.graph, &wf) {
                Ok(report) => {
                    self.announce(&report);
                    runs.push(report.run_id);
                }
                // other inputs have not been supplied yet
                Err(WorkflowError::MissingInput(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(runs)
    }

    fn announce(&mut self, report: &RunReport) {
        self.publish(
            MessageKind::RunState,
            json!({
                "workflow": report.workflow_id,
                "run_id": report.run_id,
                "version": report.version,
                "status": report.status,
                "recomputed": report.recomputed,
                "cached": report.cached,
                "awaiting": report.awaiting,
            }),
        );
        if report.status == RunStatus::Ok {
            if let Ok(view) = self.metrics(&report.workflow_id) {
                self.publish(MessageKind::MetricsUpdated, to_json(&view));
            }
        }
    }

    /// Add the statements of a `.sprov` document that are not already here.
    /// Nodes present on both sides must agree; nothing changes on error.
    fn import(&mut self, text: &str) -> Result<(), ServiceError> {
        let incoming = ProvDocument::parse(text)?.to_graph()?;
        if self.graph.is_empty() {
            self.graph = incoming;
            return Ok(());
        }
        let mut next = self.graph.clone();
        for n in incoming.nodes() {
            match self.graph.node(n.id.as_str()) {
                Some(local) if local.same_content(n) => {}
                Some(_) => return Err(sportprov::privacy::PrivacyError::ConflictingNode(n.id.to_string()).into()),
                None => {
                    next.restore_node(n.clone())?;
                }
            }
        }
        for (p, uri) in incoming.namespaces() {
            if !next.namespaces().contains_key(p) {
                next.declare_namespace(p.clone(), uri.clone());
            }
        }
        let have: HashSet<ProvEdge> = self.graph.edges().cloned().collect();
        for e in incoming.edges() {
            if !have.contains(e) {
                next.add_edge(e.clone())?;
            }
        }
        self.graph = next;
        Ok(())
    }

    pub fn chains(&self, game: &str) -> Result<ChainsView, ServiceError> {
        let g = self.games.get(game).ok_or_else(|| ServiceError::UnknownGame(game.to_string()))?;
        Ok(ChainsView {
            game: game.to_string(),
            closed: g.ingest.closed_chains().to_vec(),
            open: g.ingest.open_chain().cloned(),
        })
    }

    pub fn game_ids(&self) -> impl Iterator<Item = &str> {
        self.games.keys().map(String::as_str)
    }

    pub fn trace(&self, target: &str, filter: &QueryFilter) -> Result<TraceAnswer, ServiceError> {
        let answer = trace_influences(&self.graph, target, filter)?;
        let listing = trace_listing(&self.graph, target, filter)?;
        Ok(TraceAnswer {
            target: target.to_string(),
            listing,
            nodes: answer.nodes().cloned().collect(),
            edges: answer.edges().cloned().collect(),
        })
    }

    pub fn metrics(&self, wf: &str) -> Result<MetricsView, ServiceError> {
        let def = self.engine.definition(wf)?;
        let latest = self.engine.latest_run(wf)?;
        let mut metrics = BTreeMap::new();
        let mut slot = None;
        if latest.is_some() {
            for wave in def.waves() {
                for step in wave {
                    let s = def.get(&step).expect("waves list known steps");
                    for (port, ty) in &s.outputs {
                        if *ty != PortType::Metric {
                            continue;
                        }
                        let name = format!("{step}.{port}");
                        if let Some(Value::Table(t)) = self.engine.slot_value(wf, &name)? {
                            metrics.insert(name.clone(), t);
                            slot = Some(name);
                        }
                    }
                }
            }
        }
        Ok(MetricsView {
            workflow: wf.to_string(),
            run_id: latest.map(|r| r.run_id.clone()),
            version: latest.map(|r| r.version),
            status: latest.map(|r| r.status),
            dirty: self.engine.is_dirty(wf)?,
            table: slot.as_ref().and_then(|s| metrics.get(s).cloned()),
            slot,
            metrics,
        })
    }

    pub fn feed(&self, wf: &str) -> Option<&Feed> {
        self.feeds.get(wf)
    }

    /// The whole graph, or the part downstream of `boundary` de-identify
    /// activities.
    pub fn export_sprov(&self, boundary: &[String]) -> Result<String, ServiceError> {
        if boundary.is_empty() {
            return Ok(serialize(&self.graph)?);
        }
        Ok(export_partial(&self.graph, boundary.iter().map(String::as_str))?.to_text())
    }
}

fn check_feed(def: &WorkflowDef, feed: &Feed) -> Result<(), ServiceError> {
    match def.roots().get(&feed.input) {
        Some(PortType::Str | PortType::Events | PortType::Table) => Ok(()),
        Some(ty) => Err(ServiceError::BadRequest(format!("feed input `{}` is a {ty} port", feed.input))),
        None => Err(WorkflowError::UnknownInput(feed.input.clone()).into()),
    }
}
