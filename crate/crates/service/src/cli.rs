//! The `sportprov` command line. Every command opens the data directory,
//! applies its changes through the same command log the server uses, and
//! exits.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value as Json;
use sportprov::game::{read_events_jsonl, GameEvent, Roster};
use sportprov::graph::{ConnectionClass, NodeKind};
use sportprov::privacy::{deidentify, make_map, reidentify, RedactionMap, PLAYER_COLUMNS};
use sportprov::query::QueryFilter;
use sportprov::table::Table;
use sportprov::workflow::{Override, PortType, Replacement, RunReport, Value, WorkflowDef};

use crate::error::{ErrorClass, ServiceError};
use crate::hub::{Command, Feed, FeedPolicy, MetricsView, TraceAnswer};
use crate::store::Service;

#[derive(Parser, Debug)]
#[command(name = "sportprov", version, about = "Provenance capture and analysis for match data")]
struct Cli {
    /// Data directory holding the command log and snapshot.
    #[arg(long, global = true, env = "SPORTPROV_DATA", default_value = ".sportprov")]
    data: PathBuf,
    /// Print JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Ingest a JSON Lines event file into a game.
    Ingest(IngestArgs),
    /// Ingest an event file paced by its timestamps.
    Replay {
        #[command(flatten)]
        ingest: IngestArgs,
        /// Playback speed: a multiplier such as `4` or `4x`, or `max`.
        #[arg(long, default_value = "max")]
        speed: String,
    },
    /// Provenance queries.
    #[command(subcommand)]
    Query(QueryCmd),
    /// Possession chains of a game.
    Chains { game: String },
    /// Define a workflow if needed, set its inputs and run it.
    Run(RunArgs),
    /// Recompute what changed since the last run.
    Recompute { workflow: String },
    /// Make an older definition current again.
    Rollback { workflow: String, version: u32 },
    /// Compare two definition versions.
    Diff { workflow: String, from: u32, to: u32 },
    /// Replace an input or intermediate result.
    Override(OverrideArgs),
    /// Supply the outputs of a step waiting on a person.
    Manual(ManualArgs),
    /// Latest metric tables of a workflow.
    Metrics { workflow: String },
    /// Pseudonymisation and sharing.
    #[command(subcommand)]
    Redact(RedactCmd),
    /// Write the graph as `.sprov`.
    #[command(subcommand)]
    Export(ExportCmd),
    /// Read a `.sprov` document into the graph.
    #[command(subcommand)]
    Import(ImportCmd),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    game: String,
    /// Roster JSON; without it the roster is open.
    #[arg(long)]
    roster: Option<PathBuf>,
    file: PathBuf,
}

#[derive(Subcommand, Debug)]
enum QueryCmd {
    /// What influenced a node.
    Trace {
        #[arg(long)]
        target: String,
        /// Node kinds to keep, comma separated.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        #[arg(long)]
        depth: Option<u32>,
        #[arg(long)]
        no_stop_at_reset: bool,
        /// `data`, `physical` or both, comma separated.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Workflow definition JSON.
    definition: PathBuf,
    /// Root input `name=value` or `name=@file`.
    #[arg(long = "in", value_name = "NAME=VALUE")]
    inputs: Vec<String>,
    /// Feed a root input from a game: `game` or `game:input`.
    #[arg(long)]
    feed: Option<String>,
    #[arg(long)]
    every_event: bool,
}

#[derive(Args, Debug)]
struct OverrideArgs {
    workflow: String,
    #[arg(long)]
    target: String,
    /// Replacement value as `@file` or literal text, parsed for the target's type.
    #[arg(long, conflicts_with = "patch")]
    value: Option<String>,
    /// Rows to upsert, as a JSON array of objects or `@file`.
    #[arg(long)]
    patch: Option<String>,
    /// Key columns for `--patch`, comma separated.
    #[arg(long, value_delimiter = ',')]
    key: Vec<String>,
    #[arg(long)]
    reason: String,
    #[arg(long)]
    author: String,
    #[arg(long)]
    sticky: bool,
}

#[derive(Args, Debug)]
struct ManualArgs {
    run: String,
    step: String,
    /// Output `port=value` or `port=@file`.
    #[arg(long = "out", value_name = "PORT=VALUE")]
    outputs: Vec<String>,
    #[arg(long)]
    author: String,
}

#[derive(Subcommand, Debug)]
enum RedactCmd {
    /// Create a redaction map. Keep it private.
    MakeMap {
        #[arg(long, value_delimiter = ',')]
        players: Vec<String>,
        /// Take players from an event file instead.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long)]
        seed: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace player ids in a CSV table with codes.
    Apply {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        file: PathBuf,
    },
    /// Turn codes back into player ids.
    Reidentify {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
        file: PathBuf,
    },
    /// Export what lies downstream of de-identify activities.
    ExportPartial {
        #[arg(long, value_delimiter = ',', required = true)]
        boundary: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attach a collaborator's document at its frontier.
    Merge { file: PathBuf },
}

#[derive(Subcommand, Debug)]
enum ExportCmd {
    Sprov {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum ImportCmd {
    Sprov { file: PathBuf },
}

/// Failures reported on stderr; the class picks the exit code.
#[derive(Debug)]
enum CliError {
    User(String),
    Internal(String),
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e.class() {
            ErrorClass::Internal => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

type CliResult = Result<(), CliError>;

/// Run with `args` (program name first). Returns the exit code: 0 on
/// success, 1 for bad input, 2 for internal failures.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    return 0;
                }
                _ => 1,
            };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(CliError::User(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
        Err(CliError::Internal(m)) => {
            let _ = writeln!(err, "internal error: {m}");
            2
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| user(format!("{}: {e}", path.display())))
}

/// `@path` reads a file, anything else is the text itself.
fn text_arg(v: &str) -> Result<String, CliError> {
    match v.strip_prefix('@') {
        Some(p) => read_file(Path::new(p)),
        None => Ok(v.to_string()),
    }
}

fn split_pair(s: &str) -> Result<(&str, &str), CliError> {
    s.split_once('=').ok_or_else(|| user(format!("expected NAME=VALUE, got `{s}`")))
}

fn emit<T: Serialize>(out: &mut dyn Write, json: bool, v: &T, text: impl FnOnce() -> String) -> CliResult {
    let s = if json { serde_json::to_string_pretty(v).expect("serializable") } else { text() };
    writeln!(out, "{s}").map_err(|e| CliError::Internal(e.to_string()))
}

fn open(data: &Path) -> Result<Service, CliError> {
    Ok(Service::open(data)?)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> CliResult {
    let json = cli.json;
    match cli.cmd {
        Cmd::Serve { addr } => serve(&cli.data, &addr, out),
        Cmd::Ingest(a) => ingest(&cli.data, a, None, json, out),
        Cmd::Replay { ingest: a, speed } => {
            let speed = parse_speed(&speed)?;
            ingest(&cli.data, a, speed, json, out)
        }
        Cmd::Query(QueryCmd::Trace { target, kinds, depth, no_stop_at_reset, classes }) => {
            let mut filter = QueryFilter { stop_at_reset: !no_stop_at_reset, max_activity_depth: depth, ..QueryFilter::default() };
            if !kinds.is_empty() {
                filter.node_kinds = Some(kinds.iter().map(|k| parse_kind(k)).collect::<Result<_, _>>()?);
            }
            if !classes.is_empty() {
                let set: BTreeSet<ConnectionClass> = classes
                    .iter()
                    .map(|c| ConnectionClass::from_tag(c).ok_or_else(|| user(format!("unknown connection class `{c}`"))))
                    .collect::<Result<_, _>>()?;
                filter.connection_classes = Some(set);
            }
            let svc = open(&cli.data)?;
            let answer = svc.hub().trace(&target, &filter)?;
            emit(out, json, &answer, || trace_text(&answer))
        }
        Cmd::Chains { game } => {
            let svc = open(&cli.data)?;
            let view = svc.hub().chains(&game)?;
            emit(out, json, &view, || {
                let mut s = String::new();
                for c in view.closed.iter().chain(view.open.iter()) {
                    s.push_str(&serde_json::to_string(c).expect("serializable"));
                    s.push('\n');
                }
                s.trim_end().to_string()
            })
        }
        Cmd::Run(a) => run_workflow(&cli.data, a, json, out),
        Cmd::Recompute { workflow } => {
            let mut svc = open(&cli.data)?;
            let v = svc.apply(Command::Recompute { workflow })?;
            svc.checkpoint()?;
            report_out(out, json, v)
        }
        Cmd::Rollback { workflow, version } => {
            let mut svc = open(&cli.data)?;
            let v = svc.apply(Command::Rollback { workflow, version })?;
            svc.checkpoint()?;
            emit(out, json, &v, || format!("current version {}", v["version"]))
        }
        Cmd::Diff { workflow, from, to } => {
            let svc = open(&cli.data)?;
            let d = svc.hub().engine().diff(&workflow, from, to).map_err(ServiceError::from)?;
            emit(out, true, &d, String::new)
        }
        Cmd::Override(a) => override_cmd(&cli.data, a, json, out),
        Cmd::Manual(a) => manual(&cli.data, a, json, out),
        Cmd::Metrics { workflow } => {
            let svc = open(&cli.data)?;
            let view = svc.hub().metrics(&workflow)?;
            emit(out, json, &view, || metrics_text(&view))
        }
        Cmd::Redact(r) => redact(&cli.data, r, json, out),
        Cmd::Export(ExportCmd::Sprov { out: path }) => {
            let svc = open(&cli.data)?;
            let text = svc.hub().export_sprov(&[])?;
            text_out(out, path.as_deref(), &text)
        }
        Cmd::Import(ImportCmd::Sprov { file }) => {
            let text = read_file(&file)?;
            let mut svc = open(&cli.data)?;
            let v = svc.apply(Command::Import { text })?;
            svc.checkpoint()?;
            emit(out, json, &v, || format!("added {} nodes, {} edges", v["nodes"], v["edges"]))
        }
    }
}

fn text_out(out: &mut dyn Write, path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => write_file(p, text),
        None => out.write_all(text.as_bytes()).map_err(|e| CliError::Internal(e.to_string())),
    }
}

fn parse_kind(s: &str) -> Result<NodeKind, CliError> {
    serde_json::from_value(Json::String(s.to_string())).map_err(|_| user(format!("unknown node kind `{s}`")))
}

/// `None` means as fast as possible.
fn parse_speed(s: &str) -> Result<Option<f64>, CliError> {
    if s == "max" {
        return Ok(None);
    }
    let n: f64 = s.trim_end_matches('x').parse().map_err(|_| user(format!("bad speed `{s}`")))?;
    if !(n.is_finite() && n > 0.0) {
        return Err(user(format!("bad speed `{s}`")));
    }
    Ok(Some(n))
}

fn ingest(data: &Path, a: IngestArgs, speed: Option<f64>, json: bool, out: &mut dyn Write) -> CliResult {
    let events: Vec<GameEvent> = read_events_jsonl(&read_file(&a.file)?).map_err(|e| user(e.to_string()))?;
    let mut svc = open(data)?;
    if let Some(p) = &a.roster {
        let roster: Roster = serde_json::from_str(&read_file(p)?).map_err(|e| user(format!("{}: {e}", p.display())))?;
        svc.apply(Command::Game { game: a.game.clone(), roster })?;
    }
    let (mut fresh, mut dup, mut runs) = (0usize, 0usize, 0usize);
    let mut last_ts: Option<i64> = None;
    for ev in events {
        if let (Some(speed), Some(prev)) = (speed, last_ts) {
            let gap = (ev.ts_ms - prev).max(0) as f64 / speed;
            std::thread::sleep(Duration::from_secs_f64(gap / 1000.0));
        }
        last_ts = Some(ev.ts_ms);
        let r = svc.apply(Command::Event { game: a.game.clone(), event: ev })?;
        if r["duplicate"] == Json::Bool(true) {
            dup += 1;
        } else {
            fresh += 1;
        }
        runs += r["runs"].as_array().map_or(0, Vec::len);
    }
    let f = svc.apply(Command::Flush { game: a.game.clone() })?;
    runs += f["runs"].as_array().map_or(0, Vec::len);
    svc.checkpoint()?;
    let summary = serde_json::json!({ "game": a.game, "ingested": fresh, "duplicates": dup, "runs": runs });
    emit(out, json, &summary, || format!("{}: {fresh} events ingested, {dup} duplicates, {runs} runs", a.game))
}

/// Everything the trace found except the target itself.
fn trace_text(a: &TraceAnswer) -> String {
    a.listing.iter().map(|n| n.as_str()).filter(|n| *n != a.target).collect::<Vec<_>>().join(", ")
}

fn metrics_text(v: &MetricsView) -> String {
    let mut s = format!(
        "{} run {} version {} {}{}\n",
        v.workflow,
        v.run_id.as_deref().unwrap_or("-"),
        v.version.map_or("-".to_string(), |x| x.to_string()),
        v.status.map_or("never run".to_string(), |st| serde_json::to_string(&st).expect("serializable").trim_matches('"').to_string()),
        if v.dirty { " (stale)" } else { "" },
    );
    for (slot, t) in &v.metrics {
        s.push_str(&format!("\n{slot}\n{}", t.to_csv()));
    }
    s.trim_end().to_string()
}

fn report_out(out: &mut dyn Write, json: bool, v: Json) -> CliResult {
    let report: RunReport = serde_json::from_value(v).map_err(|e| CliError::Internal(e.to_string()))?;
    emit(out, json, &report, || {
        let status = serde_json::to_string(&report.status).expect("serializable");
        let mut s = format!("{} {}", report.run_id, status.trim_matches('"'));
        s.push_str(&format!("\nrecomputed: {}", report.recomputed.join(", ")));
        s.push_str(&format!("\ncached: {}", report.cached.join(", ")));
        if !report.awaiting.is_empty() {
            s.push_str(&format!("\nawaiting: {}", report.awaiting.join(", ")));
        }
        s
    })
}

fn typed_inputs(pairs: &[String], types: &BTreeMap<String, PortType>) -> Result<BTreeMap<String, Value>, CliError> {
    let mut inputs = BTreeMap::new();
    for p in pairs {
        let (name, raw) = split_pair(p)?;
        let ty = *types.get(name).ok_or_else(|| user(format!("`{name}` is not an input of this workflow")))?;
        let v = Value::from_text(ty, &text_arg(raw)?).map_err(|e| user(format!("{name}: {e}")))?;
        inputs.insert(name.to_string(), v);
    }
    Ok(inputs)
}

fn run_workflow(data: &Path, a: RunArgs, json: bool, out: &mut dyn Write) -> CliResult {
    let def: WorkflowDef =
        serde_json::from_str(&read_file(&a.definition)?).map_err(|e| user(format!("{}: {e}", a.definition.display())))?;
    let roots = def.clone().normalized().map_err(ServiceError::from)?.roots();
    let inputs = typed_inputs(&a.inputs, &roots)?;
    let feed = a.feed.as_deref().map(|f| {
        let (game, input) = f.split_once(':').unwrap_or((f, "jsonl"));
        Feed {
            game: game.to_string(),
            input: input.to_string(),
            policy: if a.every_event { FeedPolicy::EveryEvent } else { FeedPolicy::ChainClose },
        }
    });
    let wf = def.workflow_id.clone();
    let mut svc = open(data)?;
    let known = svc.hub().engine().workflow_ids().any(|w| w == wf);
    // inputs are recorded before the run so they stay set even if it fails
    if !known {
        svc.apply(Command::Define { definition: def, inputs, feed })?;
    } else {
        if feed.is_some() && svc.hub().feed(&wf) != feed.as_ref() {
            return Err(user(format!("workflow `{wf}` already exists with a different feed")));
        }
        let current = svc.hub().engine().definition(&wf).map_err(ServiceError::from)?;
        if current.steps != def.steps {
            svc.apply(Command::Edit { workflow: wf.clone(), definition: def })?;
        }
        if !inputs.is_empty() {
            svc.apply(Command::Inputs { workflow: wf.clone(), inputs })?;
        }
    }
    let v = svc.apply(Command::Run { workflow: wf, inputs: BTreeMap::new() })?;
    svc.checkpoint()?;
    report_out(out, json, v)
}

/// Port types of a workflow's root inputs and step outputs.
fn slot_types(svc: &Service, wf: &str) -> Result<BTreeMap<String, PortType>, CliError> {
    let def = svc.hub().engine().definition(wf).map_err(ServiceError::from)?;
    let mut types = def.roots();
    for s in &def.steps {
        for (port, ty) in &s.outputs {
            types.insert(format!("{}.{port}", s.step_id), *ty);
        }
    }
    Ok(types)
}

fn override_cmd(data: &Path, a: OverrideArgs, json: bool, out: &mut dyn Write) -> CliResult {
    let mut svc = open(data)?;
    let replacement = match (&a.value, &a.patch) {
        (Some(v), None) => {
            let types = slot_types(&svc, &a.workflow)?;
            let ty = resolve_type(&svc, &types, &a.workflow, &a.target)?;
            Replacement::Replace { value: Value::from_text(ty, &text_arg(v)?).map_err(user)? }
        }
        (None, Some(p)) => {
            let rows = serde_json::from_str(&text_arg(p)?).map_err(|e| user(format!("patch rows: {e}")))?;
            Replacement::Patch { key: a.key.clone(), rows }
        }
        _ => return Err(user("give exactly one of --value or --patch")),
    };
    let ov = Override { target: a.target, replacement, reason: a.reason, author: a.author, sticky: a.sticky };
    let v = svc.apply(Command::Override { workflow: a.workflow, ov })?;
    svc.checkpoint()?;
    emit(out, json, &v, || serde_json::to_string(&v).expect("serializable"))
}

/// The port type of an override target: a slot name, or an entity the
/// workflow produced for one.
fn resolve_type(svc: &Service, types: &BTreeMap<String, PortType>, wf: &str, target: &str) -> Result<PortType, CliError> {
    if let Some(t) = types.get(target) {
        return Ok(*t);
    }
    let node = svc.hub().graph().node(target).ok_or_else(|| user(format!("unknown override target `{target}`")))?;
    let attr = |k: &str| node.attrs.get(k).cloned();
    if attr("workflow").as_deref() == Some(wf) {
        if let Some(slot) = attr("slot") {
            if let Some(t) = types.get(&slot) {
                return Ok(*t);
            }
        }
    }
    Err(user(format!("`{target}` was not produced by workflow `{wf}`")))
}

fn manual(data: &Path, a: ManualArgs, json: bool, out: &mut dyn Write) -> CliResult {
    let mut svc = open(data)?;
    let wf = svc.hub().engine().report(&a.run).map_err(ServiceError::from)?.workflow_id.clone();
    let types = slot_types(&svc, &wf)?;
    let mut outputs = BTreeMap::new();
    for p in &a.outputs {
        let (port, raw) = split_pair(p)?;
        let ty = *types.get(&format!("{}.{port}", a.step)).ok_or_else(|| user(format!("step `{}` has no output `{port}`", a.step)))?;
        outputs.insert(port.to_string(), Value::from_text(ty, &text_arg(raw)?).map_err(|e| user(format!("{port}: {e}")))?);
    }
    let v = svc.apply(Command::Manual { run: a.run, step: a.step, outputs, author: a.author })?;
    svc.checkpoint()?;
    report_out(out, json, v)
}

fn read_map(path: &Path) -> Result<RedactionMap, CliError> {
    serde_json::from_str(&read_file(path)?).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn columns(given: &[String]) -> Vec<&str> {
    if given.is_empty() {
        PLAYER_COLUMNS.to_vec()
    } else {
        given.iter().map(String::as_str).collect()
    }
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    Table::from_csv(&read_file(path)?).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn redact(data: &Path, r: RedactCmd, json: bool, out: &mut dyn Write) -> CliResult {
    match r {
        RedactCmd::MakeMap { players, events, seed, out: path } => {
            let mut ids: BTreeSet<String> = players.into_iter().filter(|p| !p.is_empty()).collect();
            if let Some(e) = &events {
                for ev in read_events_jsonl(&read_file(e)?).map_err(|e| user(e.to_string()))? {
                    ids.extend(ev.player);
                    ids.extend(ev.target_player);
                }
            }
            let map = make_map(ids.iter().map(String::as_str), seed.as_bytes()).map_err(|e| user(e.to_string()))?;
            write_file(&path, &serde_json::to_string_pretty(&map).expect("serializable"))?;
            emit(out, json, &serde_json::json!({ "map_id": map.map_id, "players": map.entries.len() }), || {
                format!("wrote {} codes to {} (keep this file private)", map.entries.len(), path.display())
            })
        }
        RedactCmd::Apply { map, columns: cols, file } => {
            let t = deidentify(&read_table(&file)?, &read_map(&map)?, &columns(&cols)).map_err(|e| user(e.to_string()))?;
            text_out(out, None, &t.to_csv())
        }
        RedactCmd::Reidentify { map, columns: cols, file } => {
            let t = reidentify(&read_table(&file)?, &read_map(&map)?, &columns(&cols)).map_err(|e| user(e.to_string()))?;
            text_out(out, None, &t.to_csv())
        }
        RedactCmd::ExportPartial { boundary, out: path } => {
            let svc = open(data)?;
            let text = svc.hub().export_sprov(&boundary)?;
            text_out(out, path.as_deref(), &text)
        }
        RedactCmd::Merge { file } => {
            let text = read_file(&file)?;
            let mut svc = open(data)?;
            let v = svc.apply(Command::Merge { text })?;
            svc.checkpoint()?;
            emit(out, json, &v, || format!("merged {} nodes, {} edges", v["nodes"], v["edges"]))
        }
    }
}

fn serve(data: &Path, addr: &str, out: &mut dyn Write) -> CliResult {
    let svc = open(data)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    let state = std::sync::Arc::new(std::sync::RwLock::new(svc));
    let app = crate::api::router_with(state.clone());
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| user(format!("{addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Internal(e.to_string()))?;
        let _ = writeln!(out, "listening on http://{local}");
        let _ = out.flush();
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Internal(e.to_string()))
    })?;
    let mut svc = state.write().map_err(|_| CliError::Internal("state lock poisoned".into()))?;
    Ok(svc.checkpoint()?)
}
