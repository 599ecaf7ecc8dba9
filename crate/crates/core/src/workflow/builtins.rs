use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Value as Cell};

use super::{Params, PortType, Value, WorkflowError};
use crate::game::{read_events_jsonl, EventKind};
use crate::privacy::{deidentify, reidentify, PLAYER_COLUMNS};
use crate::table::{cell_number, cell_text, Table};

pub(crate) type Inputs = BTreeMap<String, Arc<Value>>;
pub(crate) type Outputs = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy)]
pub struct PortSpec {
    pub name: &'static str,
    /// Accepted declarations; the first is the default.
    pub admits: &'static [PortType],
    /// Output declared with the same type as this input.
    pub same_as: Option<&'static str>,
}

const fn port(name: &'static str, admits: &'static [PortType]) -> PortSpec {
    PortSpec { name, admits, same_as: None }
}

const TABULAR: &[PortType] = &[PortType::Table, PortType::Events, PortType::Metric];

pub(crate) struct Builtin {
    pub name: &'static str,
    pub inputs: &'static [PortSpec],
    pub outputs: &'static [PortSpec],
    pub check: fn(&Params) -> Result<(), String>,
    pub run: fn(&Params, &Inputs) -> Result<Outputs, String>,
}

const BUILTINS: &[Builtin] = &[
    Builtin {
        name: "load_events",
        inputs: &[port("jsonl", &[PortType::Str])],
        outputs: &[port("events", &[PortType::Events])],
        check: no_params,
        run: load_events,
    },
    Builtin {
        name: "load_table",
        inputs: &[port("csv", &[PortType::Str])],
        outputs: &[port("table", &[PortType::Table])],
        check: no_params,
        run: load_table,
    },
    Builtin {
        name: "filter_events",
        inputs: &[port("events", &[PortType::Events])],
        outputs: &[port("events", &[PortType::Events])],
        check: check_filter,
        run: filter_events,
    },
    Builtin {
        name: "count_by",
        inputs: &[port("events", &[PortType::Events, PortType::Table, PortType::Metric])],
        outputs: &[port("table", &[PortType::Table])],
        check: check_count_by,
        run: count_by,
    },
    Builtin {
        name: "compute_goal_pct",
        inputs: &[port("events", &[PortType::Events])],
        outputs: &[port("metric", &[PortType::Metric])],
        check: check_goal_pct,
        run: compute_goal_pct,
    },
    Builtin {
        name: "annotate_conditions",
        inputs: &[port("events", &[PortType::Events]), port("conditions", &[PortType::Table])],
        outputs: &[port("events", &[PortType::Events])],
        check: check_conditions,
        run: annotate_conditions,
    },
    Builtin {
        name: "join_mapping",
        inputs: &[port("data", &[PortType::Events, PortType::Table, PortType::Metric]), port("mapping", &[PortType::Mapping])],
        outputs: &[PortSpec { name: "data", admits: &[PortType::Events, PortType::Table, PortType::Metric], same_as: Some("data") }],
        check: check_join,
        run: join_mapping,
    },
    Builtin {
        name: "export_table",
        inputs: &[port("table", TABULAR)],
        outputs: &[port("csv", &[PortType::Str])],
        check: no_params,
        run: export_table,
    },
];

pub(crate) fn lookup(name: &str) -> Option<&'static Builtin> {
    BUILTINS.iter().find(|b| b.name == name)
}

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|b| b.name)
}

impl Builtin {
    pub(crate) fn fill_ports(
        &self,
        step: &str,
        inputs: &mut BTreeMap<String, PortType>,
        outputs: &mut BTreeMap<String, PortType>,
    ) -> Result<(), WorkflowError> {
        let fill = |specs: &[PortSpec], declared: &mut BTreeMap<String, PortType>, fixed: &BTreeMap<String, PortType>| {
            if let Some(extra) = declared.keys().find(|k| !specs.iter().any(|s| s.name == k.as_str())) {
                return Err(WorkflowError::InvalidDefinition(format!("`{}` has no port `{step}.{extra}`", self.name)));
            }
            for s in specs {
                let want = s.same_as.and_then(|i| fixed.get(i).copied());
                let ty = *declared.entry(s.name.to_string()).or_insert(want.unwrap_or(s.admits[0]));
                if !s.admits.contains(&ty) || want.is_some_and(|w| w != ty) {
                    return Err(WorkflowError::PortTypeMismatch {
                        at: format!("{step}.{}", s.name),
                        expected: want.map_or_else(
                            || s.admits.iter().map(|t| t.name()).collect::<Vec<_>>().join("|"),
                            |w| w.to_string(),
                        ),
                        found: ty.to_string(),
                    });
                }
            }
            Ok(())
        };
        fill(self.inputs, inputs, &BTreeMap::new())?;
        fill(self.outputs, outputs, inputs)
    }
}

fn no_params(p: &Params) -> Result<(), String> {
    match p.keys().next() {
        Some(k) => Err(format!("unexpected parameter `{k}`")),
        None => Ok(()),
    }
}

fn only(p: &Params, allowed: &[&str]) -> Result<(), String> {
    match p.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(format!("unexpected parameter `{k}`")),
        None => Ok(()),
    }
}

fn str_param<'a>(p: &'a Params, key: &str) -> Result<Option<&'a str>, String> {
    match p.get(key) {
        None => Ok(None),
        Some(Cell::String(s)) => Ok(Some(s)),
        Some(_) => Err(format!("parameter `{key}` must be a string")),
    }
}

fn table<'a>(inputs: &'a Inputs, port: &str) -> Result<&'a Table, String> {
    inputs.get(port).and_then(|v| v.as_table()).ok_or_else(|| format!("input `{port}` is not a table"))
}

fn one(port: &str, v: Value) -> Outputs {
    BTreeMap::from([(port.to_string(), v)])
}

fn load_events(_: &Params, inputs: &Inputs) -> Result<Outputs, String> {
    let text = inputs.get("jsonl").and_then(|v| v.as_str()).ok_or("input `jsonl` is not a string")?;
    let events = read_events_jsonl(text).map_err(|e| e.to_string())?;
    Ok(one("events", Value::Table(Table::from_events(&events))))
}

fn load_table(_: &Params, inputs: &Inputs) -> Result<Outputs, String> {
    let text = inputs.get("csv").and_then(|v| v.as_str()).ok_or("input `csv` is not a string")?;
    Ok(one("table", Value::Table(Table::from_csv(text).map_err(|e| e.to_string())?)))
}

const OPS: [&str; 8] = ["eq", "ne", "lt", "le", "gt", "ge", "in", "not_in"];

fn check_filter(p: &Params) -> Result<(), String> {
    only(p, &["field", "op", "value"])?;
    str_param(p, "field")?.ok_or("missing parameter `field`")?;
    let op = str_param(p, "op")?.ok_or("missing parameter `op`")?;
    if !OPS.contains(&op) {
        return Err(format!("unknown op `{op}`, expected one of {}", OPS.join(", ")));
    }
    match (op, p.get("value")) {
        (_, None) => Err("missing parameter `value`".into()),
        ("in" | "not_in", Some(v)) if !v.is_array() => Err(format!("`{op}` needs an array value")),
        _ => Ok(()),
    }
}

fn compare(a: &Cell, b: &Cell) -> Option<Ordering> {
    if a.is_null() || b.is_null() {
        return (a.is_null() && b.is_null()).then_some(Ordering::Equal);
    }
    match (cell_number(a), cell_number(b)) {
        (Some(x), Some(y)) => x.partial_cmp(&y),
        _ => Some(cell_text(a).cmp(&cell_text(b))),
    }
}

fn filter_events(p: &Params, inputs: &Inputs) -> Result<Outputs, String> {
    let t = table(inputs, "events")?;
    let field = str_param(p, "field")?.expect("checked");
    let op = str_param(p, "op")?.expect("checked");
    let value = &p["value"];
    let col = t.require(field).map_err(|e| e.to_string())?;
    let keep = |cell: &Cell| {
        let c = compare(cell, value);
        match op {
            "eq" => c == Some(Ordering::Equal),
            "ne" => c != Some(Ordering::Equal),
            "lt" => c == Some(Ordering::Less),
            "le" => matches!(c, Some(Ordering::Less | Ordering::Equal)),
            "gt" => c == Some(Ordering::Greater),
            "ge" => matches!(c, Some(Ordering::Greater | Ordering::Equal)),
            "in" | "not_in" => {
                let hit = value.as_array().expect("checked").iter().any(|v| compare(cell, v) == Some(Ordering::Equal));
                hit == (op == "in")
            }
            _ => unreachable!("ops checked"),
        }
    };
    let mut out = Table { columns: t.columns.clone(), rows: Vec::new() };
    out.rows = t.rows.iter().filter(|r| keep(&r[col])).cloned().collect();
    Ok(one("events", Value::Table(out)))
}

fn check_count_by(p: &Params) -> Result<(), String> {
    only(p, &["by"])?;
    str_param(p, "by")?.ok_or("missing parameter `by`")?;
    Ok(())
}

fn count_by(p: &Params, inputs: &Inputs) -> Result<Outputs, String> {
    let t = table(inputs, "events")?;
    let by = str_param(p, "by")?.expect("checked");
    let col = t.require(by).map_err(|e| e.to_string())?;
    let mut counts: BTreeMap<String, (Cell, i64)> = BTreeMap::new();
    for r in &t.rows {
        let key = serde_json::to_string(&r[col]).expect("cells serialize");
        counts.entry(key).or_insert_with(|| (r[col].clone(), 0)).1 += 1;
    }
    let mut out = Table::new([by, "count"]);
    out.rows = counts.into_values().map(|(k, n)| vec![k, json!(n)]).collect();
    Ok(one("table", Value::Table(out)))
}

fn check_goal_pct(p: &Params) -> Result<(), String> {
    only(p, &["exclude_high_wind"])?;
    match p.get("exclude_high_wind") {
        None | Some(Cell::Bool(_)) => Ok(()),
        Some(_) => Err("`exclude_high_wind` must be a boolean".into()),
    }
}

/// Goal% per player: 100 * goals / (goals + behinds), rounded half up to one
/// decimal place; null when the player has no counted scores.
pub fn goal_pct(goals: u64, behinds: u64) -> Option<f64> {
    let n = goals + behinds;
    if n == 0 {
        return None;
    }
    let tenths = (2000 * goals + n) / (2 * n);
    Some(tenths as f64 / 10.0)
}

fn compute_goal_pct(p: &Params, inputs: &Inputs) -> Result<Outputs, String> {
    let t = table(inputs, "events")?;
    let exclude_high = p.get("exclude_high_wind").and_then(Cell::as_bool).unwrap_or(false);
    let kind = t.require("kind").map_err(|e| e.to_string())?;
    let player = t.require("player").map_err(|e| e.to_string())?;
    let id = t.require("event_id").map_err(|e| e.to_string())?;
    let wind = t.column("wind");
    // player -> (goals, behinds, contributing event ids)
    let mut tally: BTreeMap<String, (u64, u64, Vec<Cell>)> = BTreeMap::new();
    for r in &t.rows {
        let k = cell_text(&r[kind]);
        let is_goal = k == EventKind::Goal.as_str();
        if !is_goal && k != EventKind::Behind.as_str() {
            continue;
        }
        let Cell::String(who) = &r[player] else { continue };
        let entry = tally.entry(who.clone()).or_default();
        let windy = wind.is_some_and(|w| cell_text(&r[w]) == "high");
        if is_goal {
            entry.0 += 1;
        } else if exclude_high && windy {
            continue;
        } else {
            entry.1 += 1;
        }
        entry.2.push(r[id].clone());
    }
    let mut out = Table::new(["player", "goals", "behinds", "goal_pct", "_events"]);
    for (who, (g, b, evs)) in tally {
        let pct = goal_pct(g, b).map_or(Cell::Null, |v| json!(v));
        out.rows.push(vec![json!(who), json!(g), json!(b), pct, Cell::Array(evs)]);
    }
    Ok(one("metric", Value::Table(out)))
}

fn check_conditions(p: &Params) -> Result<(), String> {
    only(p, &["column"])?;
    str_param(p, "column")?;
    Ok(())
}

/// Label each event with the condition whose `[start_ms, end_ms]` window
/// covers it; later rows win.
fn annotate_conditions(p: &Params, inputs: &Inputs) -> Result<Outputs, String> {
    let events = table(inputs, "events")?;
    let cond = table(inputs, "conditions")?;
    let name = str_param(p, "column")?.unwrap_or("wind");
    let (s, e, v) = (
        cond.require("start_ms").map_err(|e| e.to_string())?,
        cond.require("end_ms").map_err(|e| e.to_string())?,
        cond.require(name).map_err(|e| e.to_string())?,
    );
    let windows: Vec<(f64, f64, &Cell)> = cond
        .rows
        .iter()
        .filter_map(|r| Some((cell_number(&r[s])?, cell_number(&r[e])?, &r[v])))
        .collect();
    let ts = events.require("ts_ms").map_err(|e| e.to_string())?;
    let mut out = events.clone();
    let col = out.ensure_column(name);
    for r in &mut out.rows {
        let t = cell_number(&r[ts]);
        r[col] = t
            .and_then(|t| windows.iter().rev().find(|(a, b, _)| *a <= t && t <= *b))
            .map_or(Cell::Null, |(_, _, v)| (*v).clone());
    }
    Ok(one("events", Value::Table(out)))
}

fn check_join(p: &Params) -> Result<(), String> {
    only(p, &["direction", "columns"])?;
    match str_param(p, "direction")? {
        None | Some("forward" | "reverse") => {}
        Some(d) => return Err(format!("direction must be forward or reverse, not `{d}`")),
    }
    match p.get("columns") {
        None => Ok(()),
        Some(Cell::Array(a)) if a.iter().all(Cell::is_string) => Ok(()),
        Some(_) => Err("`columns` must be an array of strings".into()),
    }
}

pub(crate) fn is_forward_join(p: &Params) -> bool {
    p.get("direction").and_then(Cell::as_str).unwrap_or("forward") == "forward"
}

fn join_mapping(p: &Params, inputs: &Inputs) -> Result<Outputs, String> {
    let t = table(inputs, "data")?;
    let Some(Value::Mapping(map)) = inputs.get("mapping").map(|v| v.as_ref()) else {
        return Err("input `mapping` is not a redaction map".into());
    };
    let columns: Vec<&str> = match p.get("columns").and_then(Cell::as_array) {
        Some(a) => a.iter().filter_map(Cell::as_str).collect(),
        None => PLAYER_COLUMNS.to_vec(),
    };
    let out = if is_forward_join(p) { deidentify(t, map, &columns) } else { reidentify(t, map, &columns) };
    Ok(one("data", Value::Table(out.map_err(|e| e.to_string())?)))
}

fn export_table(_: &Params, inputs: &Inputs) -> Result<Outputs, String> {
    Ok(one("csv", Value::Str(table(inputs, "table")?.to_csv())))
}
