//! Row tables passed between workflow steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value as Cell;
use thiserror::Error;

use crate::game::GameEvent;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("row {row} has {got} cells, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Table { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn require(&self, name: &str) -> Result<usize, TableError> {
        self.column(name).ok_or_else(|| TableError::UnknownColumn(name.to_string()))
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<(), TableError> {
        if row.len() != self.columns.len() {
            return Err(TableError::Ragged { row: self.rows.len(), got: row.len(), expected: self.columns.len() });
        }
        self.rows.push(row);
        Ok(())
    }

    /// Index of `name`, appending a null-filled column if it is missing.
    pub fn ensure_column(&mut self, name: &str) -> usize {
        if let Some(i) = self.column(name) {
            return i;
        }
        self.columns.push(name.to_string());
        for row in &mut self.rows {
            row.push(Cell::Null);
        }
        self.columns.len() - 1
    }

    pub fn get(&self, row: usize, col: &str) -> Option<&Cell> {
        self.column(col).and_then(|c| self.rows.get(row).and_then(|r| r.get(c)))
    }

    /// Rows as column-name maps.
    pub fn records(&self) -> impl Iterator<Item = BTreeMap<&str, &Cell>> {
        self.rows.iter().map(|r| self.columns.iter().map(String::as_str).zip(r).collect())
    }

    /// One row per event: the fixed fields followed by the union of attribute
    /// keys in sorted order.
    pub fn from_events(events: &[GameEvent]) -> Table {
        let fixed = ["event_id", "ts_ms", "kind", "player", "target_player", "video_ref"];
        let extra: std::collections::BTreeSet<&str> =
            events.iter().flat_map(|e| e.attrs.keys().map(String::as_str)).collect();
        let mut t = Table::new(fixed.iter().copied().chain(extra.iter().copied()));
        for e in events {
            let opt = |v: &Option<String>| v.clone().map_or(Cell::Null, Cell::String);
            let mut row = vec![
                Cell::String(e.event_id.clone()),
                Cell::from(e.ts_ms),
                Cell::String(e.kind.as_str().to_string()),
                opt(&e.player),
                opt(&e.target_player),
                Cell::String(e.video_ref.clone()),
            ];
            row.extend(extra.iter().map(|k| e.attrs.get(*k).map_or(Cell::Null, |v| Cell::String(v.clone()))));
            t.rows.push(row);
        }
        t
    }

    /// Parse CSV with a header row. Integers and floats become numbers, empty
    /// cells become null.
    pub fn from_csv(text: &str) -> Result<Table, TableError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let columns: Vec<String> =
            rdr.headers().map_err(|e| TableError::Csv(e.to_string()))?.iter().map(str::to_string).collect();
        let mut t = Table::new(columns);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| TableError::Csv(e.to_string()))?;
            t.push(rec.iter().map(parse_cell).collect())?;
        }
        Ok(t)
    }

    /// RFC-4180 CSV with LF line endings. Columns starting with `_` are
    /// internal and left out.
    pub fn to_csv(&self) -> String {
        let keep: Vec<usize> = (0..self.columns.len()).filter(|&i| !self.columns[i].starts_with('_')).collect();
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let write = |w: &mut csv::Writer<Vec<u8>>, cells: Vec<String>| w.write_record(cells).expect("write to memory");
        write(&mut w, keep.iter().map(|&i| self.columns[i].clone()).collect());
        for row in &self.rows {
            write(&mut w, keep.iter().map(|&i| cell_text(&row[i])).collect());
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8")
    }
}

fn parse_cell(s: &str) -> Cell {
    if s.is_empty() {
        Cell::Null
    } else if let Ok(i) = s.parse::<i64>() {
        Cell::from(i)
    } else if let Some(f) = s.parse::<f64>().ok().filter(|f| f.is_finite()) {
        Cell::from(f)
    } else {
        Cell::String(s.to_string())
    }
}

/// Plain text of a cell: strings unquoted, null empty.
pub fn cell_text(c: &Cell) -> String {
    match c {
        Cell::Null => String::new(),
        Cell::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Numeric view of a cell, accepting numeric strings.
pub fn cell_number(c: &Cell) -> Option<f64> {
    match c {
        Cell::Number(n) => n.as_f64(),
        Cell::String(s) => s.parse().ok(),
        _ => None,
    }
}
