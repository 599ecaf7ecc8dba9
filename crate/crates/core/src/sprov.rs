//! `.sprov` documents: a restricted PROV-N-style text dialect with a `sport:`
//! namespace carrying the specialisations.
//!
//! ```text
//! document
//!   prefix prov <http://www.w3.org/ns/prov#>
//!   prefix sport <https://example.org/ns/sport#>
//!   agent(sport:P7, [prov:type="prov:Person", sport:type="Player", prov:label="P7", sport:seq="0"])
//! endDocument
//! ```
//!
//! The grammar is in `docs/sprov.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    ConnectionClass, EdgeKind, GraphError, NodeId, NodeKind, ProvEdge, ProvGraph, ProvNode, Relation, TopLevel,
    Violation,
};

pub const PROV_NS: &str = "http://www.w3.org/ns/prov#";
pub const SPORT_NS: &str = "https://example.org/ns/sport#";
pub const FILE_EXTENSION: &str = "sprov";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SprovError {
    #[error("syntax error at {line}:{col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("unknown relation `{name}` at {line}:{col}")]
    UnknownRelation { line: usize, col: usize, name: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("graph is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidGraph(Vec<Violation>),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Record kinds in document order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Record {
    Entity,
    Activity,
    Agent,
    Used,
    WasGeneratedBy,
    WasAssociatedWith,
    ActedOnBehalfOf,
    WasDerivedFrom,
    WasInformedBy,
}

impl Record {
    fn of_node(kind: NodeKind) -> Record {
        match kind.top_level() {
            TopLevel::Entity => Record::Entity,
            TopLevel::Activity => Record::Activity,
            TopLevel::Agent => Record::Agent,
        }
    }

    fn of_relation(r: Relation) -> Record {
        match r {
            Relation::Used => Record::Used,
            Relation::WasGeneratedBy => Record::WasGeneratedBy,
            Relation::WasAssociatedWith => Record::WasAssociatedWith,
            Relation::ActedOnBehalfOf => Record::ActedOnBehalfOf,
            Relation::WasDerivedFrom => Record::WasDerivedFrom,
            Relation::WasInformedBy => Record::WasInformedBy,
        }
    }

    pub fn relation(self) -> Option<Relation> {
        Some(match self {
            Record::Used => Relation::Used,
            Record::WasGeneratedBy => Relation::WasGeneratedBy,
            Record::WasAssociatedWith => Relation::WasAssociatedWith,
            Record::ActedOnBehalfOf => Relation::ActedOnBehalfOf,
            Record::WasDerivedFrom => Relation::WasDerivedFrom,
            Record::WasInformedBy => Relation::WasInformedBy,
            _ => return None,
        })
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Record::Entity => "entity",
            Record::Activity => "activity",
            Record::Agent => "agent",
            r => r.relation().expect("relation record").keyword(),
        }
    }

    fn from_keyword(kw: &str) -> Option<Record> {
        match kw {
            "entity" => Some(Record::Entity),
            "activity" => Some(Record::Activity),
            "agent" => Some(Record::Agent),
            _ => Relation::from_keyword(kw).map(Record::of_relation),
        }
    }

    /// Number of `-` placeholders written after the identifiers.
    fn placeholders(self) -> usize {
        match self {
            Record::Activity => 2,
            Record::Entity | Record::Agent | Record::WasDerivedFrom | Record::WasInformedBy => 0,
            _ => 1,
        }
    }
}

/// One record. Node records have `id`; relation records have `src`/`dst`.
/// Attribute keys are qualified names (`prov:label`, `sport:ts_ms`, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub record: Record,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst: Option<String>,
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
}

impl Statement {
    fn sort_key(&self) -> (Record, &str, &str, &BTreeMap<String, String>) {
        match &self.id {
            Some(id) => (self.record, id, "", &self.attrs),
            None => (self.record, self.src.as_deref().unwrap_or(""), self.dst.as_deref().unwrap_or(""), &self.attrs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvDocument {
    pub namespaces: BTreeMap<String, String>,
    pub statements: Vec<Statement>,
}

fn prov_type_for(kind: NodeKind) -> Option<&'static str> {
    match kind {
        NodeKind::Human | NodeKind::Player => Some("prov:Person"),
        NodeKind::Sensor | NodeKind::WebPortal => Some("prov:SoftwareAgent"),
        _ => None,
    }
}

fn qualify(key: &str) -> String {
    if key.contains(':') {
        key.to_string()
    } else {
        format!("sport:{key}")
    }
}

/// Attribute emission order: format-owned keys first, then the rest sorted.
fn attr_rank(key: &str) -> (u8, &str) {
    let rank = match key {
        "prov:type" => 0,
        "sport:type" => 1,
        "sport:connection" => 2,
        "prov:label" => 3,
        "sport:seq" => 4,
        _ => 5,
    };
    (rank, key)
}

impl ProvDocument {
    pub fn empty() -> Self {
        ProvDocument { namespaces: base_namespaces(), statements: Vec::new() }
    }

    /// Document for a graph, without validating it.
    pub fn from_graph(graph: &ProvGraph) -> Self {
        let mut namespaces = base_namespaces();
        namespaces.extend(graph.namespaces().iter().map(|(k, v)| (k.clone(), v.clone())));
        let mut statements = Vec::with_capacity(graph.node_count() + graph.edge_count());
        for n in graph.nodes() {
            let mut attrs = BTreeMap::new();
            if let Some(t) = prov_type_for(n.kind) {
                attrs.insert("prov:type".to_string(), t.to_string());
            }
            if n.kind.is_specialised() {
                attrs.insert("sport:type".to_string(), n.kind.name().to_string());
            }
            if !n.label.is_empty() {
                attrs.insert("prov:label".to_string(), n.label.clone());
            }
            attrs.insert("sport:seq".to_string(), n.created_at.to_string());
            attrs.extend(n.attrs.iter().map(|(k, v)| (qualify(k), v.clone())));
            statements.push(Statement {
                record: Record::of_node(n.kind),
                id: Some(n.id.to_string()),
                src: None,
                dst: None,
                attrs,
            });
        }
        for e in graph.edges() {
            let mut attrs = BTreeMap::new();
            if let Some(c) = e.kind.connection {
                attrs.insert("sport:connection".to_string(), c.tag().to_string());
            }
            if let Some(l) = &e.label {
                attrs.insert("prov:label".to_string(), l.clone());
            }
            attrs.extend(e.attrs.iter().map(|(k, v)| (qualify(k), v.clone())));
            statements.push(Statement {
                record: Record::of_relation(e.kind.relation),
                id: None,
                src: Some(e.src.to_string()),
                dst: Some(e.dst.to_string()),
                attrs,
            });
        }
        statements.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        ProvDocument { namespaces, statements }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("document\n");
        // prov and sport first, then extra prefixes alphabetically
        let mut prefixes: Vec<(&String, &String)> = self.namespaces.iter().collect();
        prefixes.sort_by_key(|(p, _)| (p.as_str() != "prov", p.as_str() != "sport", p.as_str()));
        for (p, uri) in prefixes {
            let _ = writeln!(out, "  prefix {p} <{uri}>");
        }
        for s in &self.statements {
            out.push_str("  ");
            out.push_str(s.record.keyword());
            out.push('(');
            match &s.id {
                Some(id) => {
                    let _ = write!(out, "sport:{id}");
                }
                None => {
                    let _ = write!(
                        out,
                        "sport:{}, sport:{}",
                        s.src.as_deref().unwrap_or_default(),
                        s.dst.as_deref().unwrap_or_default()
                    );
                }
            }
            for _ in 0..s.record.placeholders() {
                out.push_str(", -");
            }
            if !s.attrs.is_empty() {
                let mut attrs: Vec<(&String, &String)> = s.attrs.iter().collect();
                attrs.sort_by_key(|(k, _)| attr_rank(k));
                out.push_str(", [");
                for (i, (k, v)) in attrs.into_iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    let _ = write!(out, "{k}=");
                    write_string(&mut out, v);
                }
                out.push(']');
            }
            out.push_str(")\n");
        }
        out.push_str("endDocument\n");
        out
    }

    /// Rebuild a graph, checking graph invariants as records are added.
    pub fn to_graph(&self) -> Result<ProvGraph, SprovError> {
        let mut graph = ProvGraph::new();
        for (p, uri) in &self.namespaces {
            graph.declare_namespace(p.clone(), uri.clone());
        }
        let mut unsequenced = Vec::new();
        for s in self.statements.iter().filter(|s| s.id.is_some()) {
            let node = node_from_statement(s)?;
            match node {
                (node, true) => insert(&mut graph, node, true)?,
                (node, false) => unsequenced.push(node),
            }
        }
        for node in unsequenced {
            insert(&mut graph, node, false)?;
        }
        for s in self.statements.iter().filter(|s| s.id.is_none()) {
            graph.add_edge(edge_from_statement(s)?)?;
        }
        Ok(graph)
    }

    pub fn parse(text: &str) -> Result<ProvDocument, SprovError> {
        Parser::new(text).document()
    }
}

fn insert(graph: &mut ProvGraph, node: ProvNode, keep_seq: bool) -> Result<(), SprovError> {
    let id = node.id.to_string();
    let res = if keep_seq { graph.restore_node(node) } else { graph.add_node(node) };
    match res {
        Ok(_) => Ok(()),
        Err(GraphError::DuplicateId(_)) => Err(SprovError::DuplicateId(id)),
        Err(e) => Err(e.into()),
    }
}

fn base_namespaces() -> BTreeMap<String, String> {
    BTreeMap::from([("prov".to_string(), PROV_NS.to_string()), ("sport".to_string(), SPORT_NS.to_string())])
}

fn bad(message: String) -> SprovError {
    SprovError::Syntax { line: 0, col: 0, message }
}

/// Returns the node and whether it carried an explicit sequence number.
fn node_from_statement(s: &Statement) -> Result<(ProvNode, bool), SprovError> {
    let id = NodeId::new(s.id.clone().unwrap_or_default())?;
    let generic = match s.record {
        Record::Entity => NodeKind::Entity,
        Record::Activity => NodeKind::Activity,
        Record::Agent => NodeKind::Agent,
        _ => unreachable!("node record"),
    };
    let kind = match s.attrs.get("sport:type") {
        None => generic,
        Some(name) => match NodeKind::from_name(name) {
            Some(k) if k.is_specialised() && k.generic() == generic => k,
            _ => return Err(bad(format!("`{name}` is not a specialisation of {}", s.record.keyword()))),
        },
    };
    let mut node = ProvNode::new(id, kind, "");
    let mut sequenced = false;
    for (k, v) in &s.attrs {
        match k.as_str() {
            "sport:type" => {}
            "prov:type" => {
                if prov_type_for(kind) != Some(v.as_str()) {
                    return Err(bad(format!("unsupported prov:type `{v}` on {}", node.id)));
                }
            }
            "prov:label" => node.label = v.clone(),
            "sport:seq" => {
                node.created_at = v.parse().map_err(|_| bad(format!("sport:seq `{v}` is not an integer")))?;
                sequenced = true;
            }
            other => {
                node.attrs.insert(unqualify(other)?, v.clone());
            }
        }
    }
    if let Some(t) = prov_type_for(kind) {
        if s.attrs.get("prov:type").is_none_or(|v| v != t) {
            return Err(bad(format!("{} requires prov:type=\"{t}\"", node.id)));
        }
    }
    Ok((node, sequenced))
}

fn edge_from_statement(s: &Statement) -> Result<ProvEdge, SprovError> {
    let relation = s.record.relation().expect("relation record");
    let src = NodeId::new(s.src.clone().unwrap_or_default())?;
    let dst = NodeId::new(s.dst.clone().unwrap_or_default())?;
    let connection = match s.attrs.get("sport:connection") {
        None => None,
        Some(tag) => Some(ConnectionClass::from_tag(tag).ok_or_else(|| bad(format!("unknown connection `{tag}`")))?),
    };
    let mut edge = ProvEdge::new(src, dst, EdgeKind { relation, connection });
    for (k, v) in &s.attrs {
        match k.as_str() {
            "sport:connection" => {}
            "prov:label" => edge.label = Some(v.clone()),
            other => {
                edge.attrs.insert(unqualify(other)?, v.clone());
            }
        }
    }
    Ok(edge)
}

/// Map a qualified attribute key back to a graph attribute key.
fn unqualify(key: &str) -> Result<String, SprovError> {
    match key.split_once(':') {
        Some(("sport", local)) => Ok(local.to_string()),
        Some(("prov", _)) => Err(bad(format!("unsupported attribute `{key}`"))),
        _ => Ok(key.to_string()),
    }
}

fn write_string(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
}

/// Serialize a valid graph.
pub fn serialize(graph: &ProvGraph) -> Result<String, SprovError> {
    let violations = graph.validate();
    if !violations.is_empty() {
        return Err(SprovError::InvalidGraph(violations));
    }
    Ok(ProvDocument::from_graph(graph).to_text())
}

pub fn parse(text: &str) -> Result<ProvGraph, SprovError> {
    ProvDocument::parse(text)?.to_graph()
}

/// Project onto plain PROV: drop every specialisation and connection class.
pub fn strip_specialisation(graph: &ProvGraph) -> ProvGraph {
    let nodes = graph.nodes().map(|n| ProvNode { kind: n.kind.generic(), ..n.clone() });
    let edges = graph.edges().map(|e| ProvEdge { kind: EdgeKind { connection: None, ..e.kind }, ..e.clone() });
    ProvGraph::from_parts_unchecked(nodes, edges, graph.namespaces().clone())
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    QName(String, String),
    Iri(String),
    Str(String),
    Dash,
    Punct(char),
    Eof,
}

struct Parser<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
    tok: Tok,
    tok_pos: (usize, usize),
    namespaces: BTreeMap<String, String>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            chars: text.chars().peekable(),
            line: 1,
            col: 1,
            tok: Tok::Eof,
            tok_pos: (1, 1),
            namespaces: BTreeMap::new(),
        }
    }

    fn err_at(&self, (line, col): (usize, usize), message: impl Into<String>) -> SprovError {
        SprovError::Syntax { line, col, message: message.into() }
    }

    fn err(&self, message: impl Into<String>) -> SprovError {
        self.err_at(self.tok_pos, message)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_trivia(&mut self) -> Result<(), SprovError> {
        loop {
            match self.chars.peek() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('/') => {
                    let pos = (self.line, self.col);
                    self.bump();
                    if self.chars.peek() != Some(&'/') {
                        return Err(self.err_at(pos, "expected `//` comment"));
                    }
                    while let Some(&c) = self.chars.peek() {
                        if c == '\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn advance(&mut self) -> Result<(), SprovError> {
        self.skip_trivia()?;
        self.tok_pos = (self.line, self.col);
        let Some(&c) = self.chars.peek() else {
            self.tok = Tok::Eof;
            return Ok(());
        };
        self.tok = match c {
            '(' | ')' | '[' | ']' | ',' | '=' => {
                self.bump();
                Tok::Punct(c)
            }
            '-' => {
                self.bump();
                Tok::Dash
            }
            '<' => {
                self.bump();
                let mut iri = String::new();
                loop {
                    match self.bump() {
                        Some('>') => break,
                        Some(c) if !c.is_whitespace() => iri.push(c),
                        _ => return Err(self.err("unterminated IRI")),
                    }
                }
                Tok::Iri(iri)
            }
            '"' => {
                self.bump();
                let mut s = String::new();
                loop {
                    match self.bump() {
                        Some('"') => break,
                        Some('\\') => match self.bump() {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            Some('n') => s.push('\n'),
                            Some('r') => s.push('\r'),
                            Some('t') => s.push('\t'),
                            _ => return Err(self.err_at((self.line, self.col), "invalid escape")),
                        },
                        Some('\n') | None => return Err(self.err("unterminated string")),
                        Some(c) => s.push(c),
                    }
                }
                Tok::Str(s)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut word = String::new();
                while let Some(&c) = self.chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        word.push(c);
                        self.bump();
                    } else {
                        break;
                    }
                }
                if self.chars.peek() == Some(&':') {
                    self.bump();
                    let mut local = String::new();
                    while let Some(&c) = self.chars.peek() {
                        if c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '%' | '-') {
                            local.push(c);
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    if local.is_empty() {
                        return Err(self.err("empty local name"));
                    }
                    Tok::QName(word, local)
                } else {
                    Tok::Word(word)
                }
            }
            other => return Err(self.err(format!("unexpected character `{other}`"))),
        };
        Ok(())
    }

    fn expect_punct(&mut self, p: char) -> Result<(), SprovError> {
        if self.tok == Tok::Punct(p) {
            self.advance()
        } else {
            Err(self.err(format!("expected `{p}`")))
        }
    }

    fn qname(&mut self) -> Result<(String, String), SprovError> {
        match std::mem::replace(&mut self.tok, Tok::Eof) {
            Tok::QName(p, l) => {
                if !self.namespaces.contains_key(&p) {
                    return Err(self.err(format!("undeclared prefix `{p}`")));
                }
                self.advance()?;
                Ok((p, l))
            }
            other => {
                self.tok = other;
                Err(self.err("expected qualified name"))
            }
        }
    }

    fn node_ref(&mut self) -> Result<String, SprovError> {
        let pos = self.tok_pos;
        let (p, l) = self.qname()?;
        if p != "sport" {
            return Err(self.err_at(pos, "identifiers must be in the sport namespace"));
        }
        if !NodeId::is_valid(&l) {
            return Err(self.err_at(pos, format!("invalid identifier `{l}`")));
        }
        Ok(l)
    }

    fn document(mut self) -> Result<ProvDocument, SprovError> {
        self.advance()?;
        if self.tok != Tok::Word("document".into()) {
            return Err(self.err("expected `document`"));
        }
        self.advance()?;
        let mut statements = Vec::new();
        loop {
            let pos = self.tok_pos;
            match std::mem::replace(&mut self.tok, Tok::Eof) {
                Tok::Word(w) if w == "endDocument" => {
                    self.advance()?;
                    if self.tok != Tok::Eof {
                        return Err(self.err("content after `endDocument`"));
                    }
                    break;
                }
                Tok::Word(w) if w == "prefix" => {
                    self.advance()?;
                    let prefix = match std::mem::replace(&mut self.tok, Tok::Eof) {
                        Tok::Word(p) => p,
                        _ => return Err(self.err("expected prefix name")),
                    };
                    self.advance()?;
                    let uri = match std::mem::replace(&mut self.tok, Tok::Eof) {
                        Tok::Iri(u) => u,
                        _ => return Err(self.err("expected `<IRI>`")),
                    };
                    if self.namespaces.contains_key(&prefix) {
                        return Err(self.err_at(pos, format!("prefix `{prefix}` declared twice")));
                    }
                    self.namespaces.insert(prefix, uri);
                    self.advance()?;
                }
                Tok::Word(w) => {
                    let Some(record) = Record::from_keyword(&w) else {
                        return Err(SprovError::UnknownRelation { line: pos.0, col: pos.1, name: w });
                    };
                    self.advance()?;
                    statements.push(self.statement(record)?);
                }
                Tok::Eof => return Err(self.err("missing `endDocument`")),
                _ => return Err(self.err_at(pos, "expected a statement")),
            }
        }
        Ok(ProvDocument { namespaces: self.namespaces, statements })
    }

    fn statement(&mut self, record: Record) -> Result<Statement, SprovError> {
        self.expect_punct('(')?;
        let (id, src, dst) = if record.relation().is_none() {
            (Some(self.node_ref()?), None, None)
        } else {
            let src = self.node_ref()?;
            self.expect_punct(',')?;
            let dst = self.node_ref()?;
            (None, Some(src), Some(dst))
        };
        for _ in 0..record.placeholders() {
            self.expect_punct(',')?;
            if self.tok != Tok::Dash {
                return Err(self.err("expected `-`"));
            }
            self.advance()?;
        }
        let mut attrs = BTreeMap::new();
        if self.tok == Tok::Punct(',') {
            self.advance()?;
            self.expect_punct('[')?;
            if self.tok != Tok::Punct(']') {
                loop {
                    let pos = self.tok_pos;
                    let (p, l) = self.qname()?;
                    self.expect_punct('=')?;
                    let value = match std::mem::replace(&mut self.tok, Tok::Eof) {
                        Tok::Str(s) => s,
                        _ => return Err(self.err("expected string literal")),
                    };
                    self.advance()?;
                    if attrs.insert(format!("{p}:{l}"), value).is_some() {
                        return Err(self.err_at(pos, format!("attribute `{p}:{l}` repeated")));
                    }
                    if self.tok == Tok::Punct(',') {
                        self.advance()?;
                    } else {
                        break;
                    }
                }
            }
            self.expect_punct(']')?;
        }
        let pos = self.tok_pos;
        self.expect_punct(')')?;
        let stmt = Statement { record, id, src, dst, attrs };
        // surface attribute errors with a position
        let check = if stmt.id.is_some() { node_from_statement(&stmt).map(|_| ()) } else { edge_from_statement(&stmt).map(|_| ()) };
        match check {
            Err(SprovError::Syntax { message, .. }) => Err(self.err_at(pos, message)),
            Err(e) => Err(e),
            Ok(()) => Ok(stmt),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{EventKind, GameEvent, GameIngest, Roster};

    fn sample() -> ProvGraph {
        let mut g = ProvGraph::new();
        let mut st = GameIngest::new("g1", Roster::open());
        st.ingest_all(
            &mut g,
            &[
                GameEvent::new("bounce_1", 0, EventKind::CentreBounce, None),
                GameEvent::new("tap_1", 2, EventKind::Tap, Some("P3")),
                GameEvent::new("kick_1", 10, EventKind::Kick, Some("P12")),
                GameEvent::new("kick_2", 18, EventKind::Kick, Some("P7")),
                GameEvent::new("goal_1", 20, EventKind::Goal, Some("P7")),
            ],
        )
        .unwrap();
        crate::game::roster_bind(&mut g, "P7", "Half Forward", 0, None).unwrap();
        g
    }

    #[test]
    fn player_record_shape() {
        let mut g = ProvGraph::new();
        g.add_node(ProvNode::new(NodeId::new("P7").unwrap(), NodeKind::Player, "P7")).unwrap();
        let text = serialize(&g).unwrap();
        assert!(text.contains(r#"agent(sport:P7, [prov:type="prov:Person", sport:type="Player", prov:label="P7", sport:seq="0"])"#), "{text}");
        assert_eq!(parse(&text).unwrap(), g);
    }

    #[test]
    fn empty_graph_is_header_only() {
        let text = serialize(&ProvGraph::new()).unwrap();
        assert_eq!(
            text,
            format!("document\n  prefix prov <{PROV_NS}>\n  prefix sport <{SPORT_NS}>\nendDocument\n")
        );
    }

    #[test]
    fn sample_chain_round_trip_and_count() {
        let g = sample();
        let text = serialize(&g).unwrap();
        let doc = ProvDocument::parse(&text).unwrap();
        assert_eq!(doc.statements.len(), g.node_count() + g.edge_count());
        let back = parse(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(serialize(&back).unwrap(), text);
    }

    #[test]
    fn undeclared_prefix_rejected() {
        let text = "document\n  prefix prov <http://www.w3.org/ns/prov#>\n  prefix sport <https://example.org/ns/sport#>\n  entity(sport:e, [vt:desc=\"x\"])\nendDocument\n";
        let err = parse(text).unwrap_err();
        assert!(matches!(err, SprovError::Syntax { line: 4, col: 20, .. }), "{err:?}");
    }

    #[test]
    fn foreign_namespace_preserved() {
        let text = "document\n  prefix prov <http://www.w3.org/ns/prov#>\n  prefix sport <https://example.org/ns/sport#>\n  prefix vt <http://www.vistrails.org/registry.xsd>\n  entity(sport:e, [vt:desc=\"(None,None,None)\"]) // trailing comment\nendDocument\n";
        let g = parse(text).unwrap();
        assert_eq!(g.node("e").unwrap().attr("vt:desc"), Some("(None,None,None)"));
        assert!(serialize(&g).unwrap().contains("prefix vt <http://www.vistrails.org/registry.xsd>"));
    }

    #[test]
    fn minimal_hand_written_document() {
        let text = r#"// two nodes, one edge
document
  prefix prov <http://www.w3.org/ns/prov#>
  prefix sport <https://example.org/ns/sport#>
  entity(sport:metric_1, [sport:type="Metric"])
  activity(sport:compute, -, -, [sport:type="Computation"])
  wasGeneratedBy(sport:metric_1, sport:compute, -, [sport:connection="data"])
endDocument
"#;
        let g = parse(text).unwrap();
        assert_eq!((g.node_count(), g.edge_count()), (2, 1));
        assert!(g.validate().is_empty());
        assert_eq!(g.node("metric_1").unwrap().kind, NodeKind::Metric);
    }

    #[test]
    fn unknown_relation_and_duplicate_id() {
        let head = "document\n  prefix prov <http://www.w3.org/ns/prov#>\n  prefix sport <https://example.org/ns/sport#>\n";
        let err = parse(&format!("{head}  wasAttributedTo(sport:e, sport:a)\nendDocument\n")).unwrap_err();
        assert_eq!(err, SprovError::UnknownRelation { line: 4, col: 3, name: "wasAttributedTo".into() });
        let err = parse(&format!("{head}  entity(sport:e)\n  entity(sport:e)\nendDocument\n")).unwrap_err();
        assert_eq!(err, SprovError::DuplicateId("e".into()));
    }

    #[test]
    fn malformed_input_positions() {
        let err = parse("document\n  entity(sport:e\n").unwrap_err();
        assert!(matches!(err, SprovError::Syntax { line: 2, .. }), "{err:?}");
        assert!(matches!(parse("").unwrap_err(), SprovError::Syntax { line: 1, col: 1, .. }));
        let head = "document\n  prefix prov <http://www.w3.org/ns/prov#>\n  prefix sport <https://example.org/ns/sport#>\n";
        // activity requires its two placeholders
        assert!(parse(&format!("{head}  activity(sport:a)\nendDocument\n")).is_err());
        assert!(parse(&format!("{head}  entity(sport:e, [sport:type=\"Player\"])\nendDocument\n")).is_err());
    }

    #[test]
    fn strings_are_escaped() {
        let mut g = ProvGraph::new();
        g.add_node(ProvNode::new(NodeId::new("e").unwrap(), NodeKind::Entity, "say \"hi\"\\\nnow")).unwrap();
        assert_eq!(parse(&serialize(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn invalid_graph_not_serialized() {
        let g = ProvGraph::from_parts_unchecked(
            [ProvNode::new(NodeId::new("a").unwrap(), NodeKind::Entity, "")],
            [ProvEdge::new(NodeId::new("a").unwrap(), NodeId::new("b").unwrap(), EdgeKind::data(Relation::WasDerivedFrom))],
            BTreeMap::new(),
        );
        assert!(matches!(serialize(&g).unwrap_err(), SprovError::InvalidGraph(_)));
    }

    #[test]
    fn strip_projects_to_plain_prov() {
        let g = sample();
        let s = strip_specialisation(&g);
        assert_eq!((s.node_count(), s.edge_count()), (g.node_count(), g.edge_count()));
        let kinds: std::collections::BTreeSet<NodeKind> = s.nodes().map(|n| n.kind).collect();
        assert!(kinds.iter().all(|k| !k.is_specialised()));
        assert!(s.edges().all(|e| e.kind.connection.is_none()));
        assert_eq!(s.node("P7").unwrap().kind, NodeKind::Agent);
        assert_eq!(strip_specialisation(&s), s);
        assert!(s.validate().is_empty());
        assert_eq!(parse(&serialize(&s).unwrap()).unwrap(), s);
    }
}
