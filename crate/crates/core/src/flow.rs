//! Rule-based dialog flows: a finite state machine whose nodes are system
//! actions and whose edges carry transition conditions.
//!
//! Flows are exchanged as a small JSON document (see [`parse_flow`] and
//! [`serialize_flow`]). Parsed flows are always held in canonical order:
//! entities sorted by name, nodes by id, edges by `(from, to, condition)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{parse_template, Segment};

pub type NodeId = String;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogFlow {
    pub name: String,
    pub schema_version: u32,
    pub start: NodeId,
    pub entities: Vec<EntityDef>,
    pub nodes: Vec<FlowNode>,
    pub edges: Vec<FlowEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowNode {
    pub id: NodeId,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Message { text: String },
    Question { text: String, entity: String },
    Api { api_name: String, args: Vec<String> },
    End,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Condition {
    Always,
    Option { entity: String, value: String },
    EntityPresent { entity: String },
    EntityAbsent { entity: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnumValue {
    pub value: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityDef {
    pub name: String,
    pub kind: EntityKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntityKind {
    Enum(Vec<EnumValue>),
    Open,
}

impl EntityDef {
    pub fn open(name: impl Into<String>) -> Self {
        EntityDef { name: name.into(), kind: EntityKind::Open }
    }

    pub fn enumeration<I, S>(name: impl Into<String>, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let values = values.into_iter().map(|v| EnumValue { value: v.into(), synonyms: Vec::new() }).collect();
        EntityDef { name: name.into(), kind: EntityKind::Enum(values) }
    }

    pub fn values(&self) -> &[EnumValue] {
        match &self.kind {
            EntityKind::Enum(values) => values,
            EntityKind::Open => &[],
        }
    }

    pub fn is_open(&self) -> bool {
        matches!(self.kind, EntityKind::Open)
    }

    /// Case-insensitive lookup of a declared enum value, returning its canonical spelling.
    pub fn canonical_value(&self, value: &str) -> Option<&str> {
        self.values().iter().find(|v| v.value.to_lowercase() == value.to_lowercase()).map(|v| v.value.as_str())
    }
}

impl FlowNode {
    pub fn message(id: impl Into<String>, text: impl Into<String>) -> Self {
        FlowNode { id: id.into(), kind: NodeKind::Message { text: text.into() } }
    }

    pub fn question(id: impl Into<String>, text: impl Into<String>, entity: impl Into<String>) -> Self {
        FlowNode { id: id.into(), kind: NodeKind::Question { text: text.into(), entity: entity.into() } }
    }

    pub fn api(id: impl Into<String>, api_name: impl Into<String>, args: Vec<String>) -> Self {
        FlowNode { id: id.into(), kind: NodeKind::Api { api_name: api_name.into(), args } }
    }

    pub fn end(id: impl Into<String>) -> Self {
        FlowNode { id: id.into(), kind: NodeKind::End }
    }

    pub fn text(&self) -> Option<&str> {
        match &self.kind {
            NodeKind::Message { text } | NodeKind::Question { text, .. } => Some(text),
            _ => None,
        }
    }

    pub fn is_end(&self) -> bool {
        matches!(self.kind, NodeKind::End)
    }
}

impl FlowEdge {
    pub fn new(from: impl Into<String>, to: impl Into<String>, condition: Condition) -> Self {
        FlowEdge { from: from.into(), to: to.into(), condition }
    }
}

impl Condition {
    pub fn option(entity: impl Into<String>, value: impl Into<String>) -> Self {
        Condition::Option { entity: entity.into(), value: value.into() }
    }

    pub fn entity(&self) -> Option<&str> {
        match self {
            Condition::Always => None,
            Condition::Option { entity, .. }
            | Condition::EntityPresent { entity }
            | Condition::EntityAbsent { entity } => Some(entity),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Condition::Always => 0,
            Condition::Option { .. } => 1,
            Condition::EntityPresent { .. } => 2,
            Condition::EntityAbsent { .. } => 3,
        }
    }

    /// Evaluates the condition against the latest binding of each entity.
    pub fn holds(&self, bindings: &BTreeMap<String, String>) -> bool {
        match self {
            Condition::Always => true,
            Condition::Option { entity, value } => {
                bindings.get(entity).is_some_and(|bound| bound.to_lowercase() == value.to_lowercase())
            }
            Condition::EntityPresent { entity } => bindings.contains_key(entity),
            Condition::EntityAbsent { entity } => !bindings.contains_key(entity),
        }
    }

    /// True when no entity memory can satisfy both conditions at once.
    pub fn excludes(&self, other: &Condition) -> bool {
        use Condition::*;
        match (self, other) {
            (Option { entity: a, value: x }, Option { entity: b, value: y }) => {
                a == b && x.to_lowercase() != y.to_lowercase()
            }
            (EntityAbsent { entity: a }, Option { entity: b, .. } | EntityPresent { entity: b })
            | (Option { entity: a, .. } | EntityPresent { entity: a }, EntityAbsent { entity: b }) => a == b,
            _ => false,
        }
    }
}

impl PartialOrd for Condition {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Condition {
    fn cmp(&self, other: &Self) -> Ordering {
        let value = |c: &Condition| match c {
            Condition::Option { value, .. } => value.clone(),
            _ => String::new(),
        };
        self.rank()
            .cmp(&other.rank())
            .then_with(|| self.entity().cmp(&other.entity()))
            .then_with(|| value(self).cmp(&value(other)))
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Always => write!(f, "always"),
            Condition::Option { entity, value } => write!(f, "{entity}={value}"),
            Condition::EntityPresent { entity } => write!(f, "{entity}?"),
            Condition::EntityAbsent { entity } => write!(f, "!{entity}"),
        }
    }
}

impl DialogFlow {
    pub fn node(&self, id: &str) -> Option<&FlowNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn entity(&self, name: &str) -> Option<&EntityDef> {
        self.entities.iter().find(|e| e.name == name)
    }

    /// Outgoing edges of `id` in canonical order.
    pub fn outgoing<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a FlowEdge> + 'a {
        self.edges.iter().filter(move |e| e.from == id)
    }

    pub fn canonicalize(&mut self) {
        self.entities.sort_by(|a, b| a.name.cmp(&b.name));
        self.nodes.sort_by(|a, b| a.id.cmp(&b.id));
        self.edges.sort_by(|a, b| (&a.from, &a.to, &a.condition).cmp(&(&b.from, &b.to, &b.condition)));
    }

    pub fn canonical(&self) -> DialogFlow {
        let mut flow = self.clone();
        flow.canonicalize();
        flow
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("reference error: `{id}` ({context}) does not exist")]
    Reference { id: String, context: String },
    #[error("flow is invalid ({} problems)", .0.len())]
    InvalidFlow(ValidationReport),
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowDoc {
    #[serde(default = "default_schema_version")]
    schema_version: u32,
    #[serde(default)]
    name: String,
    start: String,
    entities: Vec<EntityDoc>,
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum EntityKindTag {
    Enum,
    Open,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct EntityDoc {
    name: String,
    kind: EntityKindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<EnumValue>>,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum NodeKindTag {
    Message,
    Question,
    Api,
    End,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    kind: NodeKindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    api_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    args: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum ConditionTag {
    Always,
    Option,
    EntityPresent,
    EntityAbsent,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionDoc {
    kind: ConditionTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    from: String,
    to: String,
    condition: ConditionDoc,
}

impl From<&EntityDef> for EntityDoc {
    fn from(def: &EntityDef) -> Self {
        match &def.kind {
            EntityKind::Enum(values) => {
                EntityDoc { name: def.name.clone(), kind: EntityKindTag::Enum, values: Some(values.clone()) }
            }
            EntityKind::Open => EntityDoc { name: def.name.clone(), kind: EntityKindTag::Open, values: None },
        }
    }
}

impl TryFrom<EntityDoc> for EntityDef {
    type Error = FlowError;

    fn try_from(doc: EntityDoc) -> Result<Self, FlowError> {
        let kind = match (doc.kind, doc.values) {
            (EntityKindTag::Enum, Some(values)) => EntityKind::Enum(values),
            (EntityKindTag::Enum, None) => {
                return Err(FlowError::Schema(format!("enum entity `{}` requires `values`", doc.name)))
            }
            (EntityKindTag::Open, None) => EntityKind::Open,
            (EntityKindTag::Open, Some(_)) => {
                return Err(FlowError::Schema(format!("open entity `{}` must not declare `values`", doc.name)))
            }
        };
        Ok(EntityDef { name: doc.name, kind })
    }
}

impl From<&FlowNode> for NodeDoc {
    fn from(node: &FlowNode) -> Self {
        let mut doc = NodeDoc {
            id: node.id.clone(),
            kind: NodeKindTag::End,
            text: None,
            entity: None,
            api_name: None,
            args: None,
        };
        match &node.kind {
            NodeKind::Message { text } => {
                doc.kind = NodeKindTag::Message;
                doc.text = Some(text.clone());
            }
            NodeKind::Question { text, entity } => {
                doc.kind = NodeKindTag::Question;
                doc.text = Some(text.clone());
                doc.entity = Some(entity.clone());
            }
            NodeKind::Api { api_name, args } => {
                doc.kind = NodeKindTag::Api;
                doc.api_name = Some(api_name.clone());
                doc.args = Some(args.clone());
            }
            NodeKind::End => {}
        }
        doc
    }
}

impl TryFrom<NodeDoc> for FlowNode {
    type Error = FlowError;

    fn try_from(doc: NodeDoc) -> Result<Self, FlowError> {
        let unexpected =
            |field: &str| FlowError::Schema(format!("node `{}`: field `{field}` is not allowed for this kind", doc.id));
        let missing = |field: &str| FlowError::Schema(format!("node `{}`: missing required field `{field}`", doc.id));
        let kind = match doc.kind {
            NodeKindTag::Message => {
                if doc.entity.is_some() {
                    return Err(unexpected("entity"));
                }
                if doc.api_name.is_some() {
                    return Err(unexpected("api_name"));
                }
                if doc.args.is_some() {
                    return Err(unexpected("args"));
                }
                NodeKind::Message { text: doc.text.clone().ok_or_else(|| missing("text"))? }
            }
            NodeKindTag::Question => {
                if doc.api_name.is_some() {
                    return Err(unexpected("api_name"));
                }
                if doc.args.is_some() {
                    return Err(unexpected("args"));
                }
                NodeKind::Question {
                    text: doc.text.clone().ok_or_else(|| missing("text"))?,
                    entity: doc.entity.clone().ok_or_else(|| missing("entity"))?,
                }
            }
            NodeKindTag::Api => {
                if doc.text.is_some() {
                    return Err(unexpected("text"));
                }
                if doc.entity.is_some() {
                    return Err(unexpected("entity"));
                }
                NodeKind::Api {
                    api_name: doc.api_name.clone().ok_or_else(|| missing("api_name"))?,
                    args: doc.args.clone().unwrap_or_default(),
                }
            }
            NodeKindTag::End => {
                for (present, field) in [
                    (doc.text.is_some(), "text"),
                    (doc.entity.is_some(), "entity"),
                    (doc.api_name.is_some(), "api_name"),
                    (doc.args.is_some(), "args"),
                ] {
                    if present {
                        return Err(unexpected(field));
                    }
                }
                NodeKind::End
            }
        };
        Ok(FlowNode { id: doc.id, kind })
    }
}

impl From<&Condition> for ConditionDoc {
    fn from(c: &Condition) -> Self {
        match c {
            Condition::Always => ConditionDoc { kind: ConditionTag::Always, entity: None, value: None },
            Condition::Option { entity, value } => {
                ConditionDoc { kind: ConditionTag::Option, entity: Some(entity.clone()), value: Some(value.clone()) }
            }
            Condition::EntityPresent { entity } => {
                ConditionDoc { kind: ConditionTag::EntityPresent, entity: Some(entity.clone()), value: None }
            }
            Condition::EntityAbsent { entity } => {
                ConditionDoc { kind: ConditionTag::EntityAbsent, entity: Some(entity.clone()), value: None }
            }
        }
    }
}

impl ConditionDoc {
    fn into_condition(self, edge: &str) -> Result<Condition, FlowError> {
        let schema = |msg: &str| FlowError::Schema(format!("edge {edge}: {msg}"));
        match (self.kind, self.entity, self.value) {
            (ConditionTag::Always, None, None) => Ok(Condition::Always),
            (ConditionTag::Always, _, _) => Err(schema("`always` takes no entity or value")),
            (ConditionTag::Option, Some(entity), Some(value)) => Ok(Condition::Option { entity, value }),
            (ConditionTag::Option, _, _) => Err(schema("`option` requires entity and value")),
            (ConditionTag::EntityPresent, Some(entity), None) => Ok(Condition::EntityPresent { entity }),
            (ConditionTag::EntityAbsent, Some(entity), None) => Ok(Condition::EntityAbsent { entity }),
            (_, _, _) => Err(schema("entity conditions require an entity and no value")),
        }
    }
}

pub fn entity_defs_from_json(bytes: &[u8]) -> Result<Vec<EntityDef>, FlowError> {
    let docs: Vec<EntityDoc> = serde_json::from_slice(bytes).map_err(json_error)?;
    docs.into_iter().map(EntityDef::try_from).collect()
}

pub fn entity_defs_to_json(defs: &[EntityDef]) -> String {
    let docs: Vec<EntityDoc> = defs.iter().map(EntityDoc::from).collect();
    let mut out = serde_json::to_string_pretty(&docs).expect("entity docs serialize");
    out.push('\n');
    out
}

impl Serialize for EntityDef {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        EntityDoc::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EntityDef {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = EntityDoc::deserialize(deserializer)?;
        EntityDef::try_from(doc).map_err(serde::de::Error::custom)
    }
}

fn json_error(err: serde_json::Error) -> FlowError {
    use serde_json::error::Category;
    match err.classify() {
        Category::Syntax | Category::Eof | Category::Io => {
            FlowError::Syntax { line: err.line(), column: err.column(), message: err.to_string() }
        }
        Category::Data => FlowError::Schema(err.to_string()),
    }
}

/// Parses a flow document. The result is canonicalized; structural and
/// reference errors are rejected, semantic problems are left to [`validate_flow`].
pub fn parse_flow(bytes: &[u8]) -> Result<DialogFlow, FlowError> {
    let text = std::str::from_utf8(bytes).map_err(|e| FlowError::Syntax {
        line: 1,
        column: e.valid_up_to() + 1,
        message: format!("invalid UTF-8: {e}"),
    })?;
    let doc: FlowDoc = serde_json::from_str(text).map_err(json_error)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(FlowError::Schema(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    let entities = doc.entities.into_iter().map(EntityDef::try_from).collect::<Result<Vec<_>, _>>()?;
    let nodes = doc.nodes.into_iter().map(FlowNode::try_from).collect::<Result<Vec<_>, _>>()?;
    let edges = doc
        .edges
        .into_iter()
        .map(|e| {
            let label = format!("{}->{}", e.from, e.to);
            Ok(FlowEdge { condition: e.condition.into_condition(&label)?, from: e.from, to: e.to })
        })
        .collect::<Result<Vec<_>, FlowError>>()?;
    let mut flow =
        DialogFlow { name: doc.name, schema_version: doc.schema_version, start: doc.start, entities, nodes, edges };
    check_references(&flow)?;
    flow.canonicalize();
    Ok(flow)
}

fn check_references(flow: &DialogFlow) -> Result<(), FlowError> {
    let nodes: BTreeSet<&str> = flow.nodes.iter().map(|n| n.id.as_str()).collect();
    let reference = |id: &str, context: String| FlowError::Reference { id: id.to_string(), context };
    if !nodes.contains(flow.start.as_str()) {
        return Err(reference(&flow.start, "start node".into()));
    }
    let entity = |name: &str, context: String| match flow.entity(name) {
        Some(def) => Ok(def),
        None => Err(reference(name, context)),
    };
    for node in &flow.nodes {
        match &node.kind {
            NodeKind::Question { entity: e, .. } => {
                entity(e, format!("entity of question `{}`", node.id))?;
            }
            NodeKind::Api { args, .. } => {
                for arg in args {
                    entity(arg, format!("argument of api node `{}`", node.id))?;
                }
            }
            _ => {}
        }
        if let Some(text) = node.text() {
            if let Ok(segments) = parse_template(text) {
                for seg in segments {
                    if let Segment::Placeholder(name) = seg {
                        entity(&name, format!("placeholder in node `{}`", node.id))?;
                    }
                }
            }
        }
    }
    for edge in &flow.edges {
        for end in [&edge.from, &edge.to] {
            if !nodes.contains(end.as_str()) {
                return Err(reference(end, format!("endpoint of edge {}->{}", edge.from, edge.to)));
            }
        }
        if let Some(name) = edge.condition.entity() {
            let def = entity(name, format!("condition on edge {}->{}", edge.from, edge.to))?;
            if let Condition::Option { value, .. } = &edge.condition {
                if def.canonical_value(value).is_none() {
                    return Err(reference(
                        value,
                        format!("value of entity `{name}` on edge {}->{}", edge.from, edge.to),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Writes the canonical document: fixed key order, sorted collections, two-space indent.
pub fn serialize_flow(flow: &DialogFlow) -> Result<Vec<u8>, FlowError> {
    let report = validate_flow(flow);
    if report.has_errors() {
        return Err(FlowError::InvalidFlow(report));
    }
    let flow = flow.canonical();
    let doc = FlowDoc {
        schema_version: flow.schema_version,
        name: flow.name.clone(),
        start: flow.start.clone(),
        entities: flow.entities.iter().map(EntityDoc::from).collect(),
        nodes: flow.nodes.iter().map(NodeDoc::from).collect(),
        edges: flow
            .edges
            .iter()
            .map(|e| EdgeDoc { from: e.from.clone(), to: e.to.clone(), condition: (&e.condition).into() })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("flow document serializes");
    out.push(b'\n');
    Ok(out)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCode {
    MissingStart,
    DuplicateNode,
    DuplicateEntity,
    InvalidEntityName,
    DuplicateEnumValue,
    DanglingEdge,
    UndeclaredEntity,
    UndeclaredValue,
    BadTemplate,
    QuestionWithoutAnswer,
    MissingOutgoing,
    EndHasOutgoing,
    AmbiguousEdges,
    UnreachableNode,
    DeadEnd,
}

impl fmt::Display for IssueCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("code serializes");
        write!(f, "{}", s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub code: IssueCode,
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn len(&self) -> usize {
        self.issues.len()
    }

    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::Error)
    }

    pub fn codes(&self) -> Vec<IssueCode> {
        self.issues.iter().map(|i| i.code).collect()
    }

    fn error(&mut self, code: IssueCode, location: &str, message: String) {
        self.issues.push(Issue { severity: Severity::Error, code, location: location.to_string(), message });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            writeln!(f, "{:?} {} at {}: {}", issue.severity, issue.code, issue.location, issue.message)?;
        }
        Ok(())
    }
}

fn valid_entity_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some('a'..='z')) && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

/// Checks every flow invariant plus reachability. Never fails; problems are
/// returned as report entries sorted by `(location, code)`.
pub fn validate_flow(flow: &DialogFlow) -> ValidationReport {
    let flow = flow.canonical();
    let mut report = ValidationReport::default();

    let mut node_ids = BTreeSet::new();
    for node in &flow.nodes {
        if !node_ids.insert(node.id.as_str()) {
            report.error(IssueCode::DuplicateNode, &node.id, format!("node id `{}` is declared twice", node.id));
        }
    }
    if !node_ids.contains(flow.start.as_str()) {
        report.error(IssueCode::MissingStart, &flow.start, "start does not reference a node".into());
    }

    let mut entities: BTreeMap<&str, &EntityDef> = BTreeMap::new();
    for def in &flow.entities {
        let location = format!("entity:{}", def.name);
        if entities.insert(def.name.as_str(), def).is_some() {
            report.error(IssueCode::DuplicateEntity, &location, format!("entity `{}` is declared twice", def.name));
        }
        if !valid_entity_name(&def.name) {
            report.error(
                IssueCode::InvalidEntityName,
                &location,
                format!("entity name `{}` must match [a-z][a-z0-9_]*", def.name),
            );
        }
        let mut seen = BTreeSet::new();
        for value in def.values() {
            if !seen.insert(value.value.to_lowercase()) {
                report.error(
                    IssueCode::DuplicateEnumValue,
                    &location,
                    format!("value `{}` is declared twice", value.value),
                );
            }
        }
    }

    let mut outgoing: BTreeMap<&str, Vec<&FlowEdge>> = BTreeMap::new();
    for edge in &flow.edges {
        let mut dangling = false;
        for end in [&edge.from, &edge.to] {
            if !node_ids.contains(end.as_str()) {
                dangling = true;
                report.error(
                    IssueCode::DanglingEdge,
                    &edge.from,
                    format!("edge {}->{} references unknown node `{end}`", edge.from, edge.to),
                );
            }
        }
        if let Some(name) = edge.condition.entity() {
            match entities.get(name) {
                None => report.error(
                    IssueCode::UndeclaredEntity,
                    &edge.from,
                    format!("condition `{}` names undeclared entity", edge.condition),
                ),
                Some(def) => {
                    if let Condition::Option { value, .. } = &edge.condition {
                        if def.canonical_value(value).is_none() {
                            report.error(
                                IssueCode::UndeclaredValue,
                                &edge.from,
                                format!("`{value}` is not an enum value of `{name}`"),
                            );
                        }
                    }
                }
            }
        }
        if !dangling {
            outgoing.entry(edge.from.as_str()).or_default().push(edge);
        }
    }

    for node in &flow.nodes {
        let out = outgoing.get(node.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        if let Some(text) = node.text() {
            match parse_template(text) {
                Ok(segments) => {
                    for seg in segments {
                        if let Segment::Placeholder(name) = seg {
                            if !entities.contains_key(name.as_str()) {
                                report.error(
                                    IssueCode::UndeclaredEntity,
                                    &node.id,
                                    format!("placeholder `[{name}]` names undeclared entity"),
                                );
                            }
                        }
                    }
                }
                Err(e) => report.error(IssueCode::BadTemplate, &node.id, e.to_string()),
            }
        }
        match &node.kind {
            NodeKind::Question { entity, .. } => {
                if !entities.contains_key(entity.as_str()) {
                    report.error(
                        IssueCode::UndeclaredEntity,
                        &node.id,
                        format!("question asks for undeclared entity `{entity}`"),
                    );
                }
                // open entities have no options, so presence of the answer stands in for one
                let open = entities.get(entity.as_str()).is_some_and(|d| d.is_open());
                let answered = out.iter().any(|e| match &e.condition {
                    Condition::Always => true,
                    Condition::Option { entity: e, .. } => e == entity,
                    Condition::EntityPresent { entity: e } => open && e == entity,
                    _ => false,
                });
                if !answered {
                    report.error(
                        IssueCode::QuestionWithoutAnswer,
                        &node.id,
                        format!("question needs an `option` edge on `{entity}` or an `always` edge"),
                    );
                }
            }
            NodeKind::Api { args, .. } => {
                for arg in args {
                    if !entities.contains_key(arg.as_str()) {
                        report.error(
                            IssueCode::UndeclaredEntity,
                            &node.id,
                            format!("api argument `{arg}` is not a declared entity"),
                        );
                    }
                }
            }
            _ => {}
        }
        if node.is_end() {
            if !out.is_empty() {
                report.error(IssueCode::EndHasOutgoing, &node.id, "end nodes must not have outgoing edges".into());
            }
        } else if out.is_empty() {
            report.error(IssueCode::MissingOutgoing, &node.id, "node has no outgoing edge".into());
        }
        let ambiguous =
            out.iter().enumerate().any(|(i, a)| out[i + 1..].iter().any(|b| !a.condition.excludes(&b.condition)));
        if ambiguous {
            report.error(IssueCode::AmbiguousEdges, &node.id, "outgoing conditions are not mutually exclusive".into());
        }
    }

    if node_ids.contains(flow.start.as_str()) {
        let reachable =
            reach(flow.start.as_str(), |n| outgoing.get(n).into_iter().flatten().map(|e| e.to.as_str()).collect());
        let mut incoming: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for edges in outgoing.values() {
            for e in edges {
                incoming.entry(e.to.as_str()).or_default().push(e.from.as_str());
            }
        }
        let mut finishing = BTreeSet::new();
        for node in flow.nodes.iter().filter(|n| n.is_end()) {
            finishing.extend(reach(node.id.as_str(), |n| incoming.get(n).cloned().unwrap_or_default()));
        }
        for id in &node_ids {
            if !reachable.contains(id) {
                report.error(IssueCode::UnreachableNode, id, "node is not reachable from start".into());
            } else if !finishing.contains(id) {
                report.error(IssueCode::DeadEnd, id, "no end node is reachable from this node".into());
            }
        }
    }

    report.issues.sort_by(|a, b| (&a.location, a.code, &a.message).cmp(&(&b.location, b.code, &b.message)));
    report
}

fn reach<'a>(from: &'a str, next: impl Fn(&'a str) -> Vec<&'a str>) -> BTreeSet<&'a str> {
    let mut seen = BTreeSet::from([from]);
    let mut queue = VecDeque::from([from]);
    while let Some(n) = queue.pop_front() {
        for m in next(n) {
            if seen.insert(m) {
                queue.push_back(m);
            }
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"start":"m1","nodes":[{"id":"m1","kind":"message","text":"Hi"},{"id":"e","kind":"end"}],"edges":[{"from":"m1","to":"e","condition":{"kind":"always"}}],"entities":[]}"#;

    fn fonts_mini() -> DialogFlow {
        parse_flow(crate::samples::FONTS_MINI.as_bytes()).unwrap()
    }

    #[test]
    fn parses_minimal_flow() {
        let flow = parse_flow(MINIMAL.as_bytes()).unwrap();
        assert_eq!(flow.nodes.len(), 2);
        assert_eq!(flow.edges.len(), 1);
        assert_eq!(flow.schema_version, 1);
        assert!(validate_flow(&flow).is_empty());
    }

    #[test]
    fn canonical_minimal_round_trips_byte_identical() {
        let canonical = serialize_flow(&parse_flow(MINIMAL.as_bytes()).unwrap()).unwrap();
        let again = serialize_flow(&parse_flow(&canonical).unwrap()).unwrap();
        assert_eq!(canonical, again);
    }

    #[test]
    fn dangling_edge_is_a_reference_error() {
        let doc = MINIMAL.replace(r#""to":"e""#, r#""to":"nope""#);
        match parse_flow(doc.as_bytes()) {
            Err(FlowError::Reference { id, .. }) => assert_eq!(id, "nope"),
            other => panic!("expected reference error, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_flow(b"{\n  \"start\": ,\n}").unwrap_err();
        match err {
            FlowError::Syntax { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_and_wrong_type_are_schema_errors() {
        let doc = MINIMAL.replace(r#""start":"m1""#, r#""start":"m1","colour":"red""#);
        assert!(matches!(parse_flow(doc.as_bytes()), Err(FlowError::Schema(_))));
        let doc = MINIMAL.replace(r#""start":"m1""#, r#""start":7"#);
        assert!(matches!(parse_flow(doc.as_bytes()), Err(FlowError::Schema(_))));
        let doc = MINIMAL.replace(r#""kind":"message","text":"Hi""#, r#""kind":"message""#);
        assert!(matches!(parse_flow(doc.as_bytes()), Err(FlowError::Schema(_))));
        let doc = MINIMAL.replace(r#"{"id":"e","kind":"end"}"#, r#"{"id":"e","kind":"end","text":"bye"}"#);
        assert!(matches!(parse_flow(doc.as_bytes()), Err(FlowError::Schema(_))));
    }

    #[test]
    fn fonts_mini_is_valid() {
        let flow = fonts_mini();
        assert_eq!(flow.nodes.len(), 6);
        assert_eq!(flow.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Question { .. })).count(), 2);
        assert_eq!(validate_flow(&flow), ValidationReport::default());
    }

    #[test]
    fn unreachable_node_is_reported_once() {
        let mut flow = parse_flow(MINIMAL.as_bytes()).unwrap();
        flow.nodes.push(FlowNode::message("x", "orphan"));
        flow.edges.push(FlowEdge::new("x", "e", Condition::Always));
        let report = validate_flow(&flow);
        assert_eq!(report.len(), 1);
        assert_eq!(report.issues[0].code, IssueCode::UnreachableNode);
        assert_eq!(report.issues[0].location, "x");
        assert_eq!(report.issues[0].severity, Severity::Error);
    }

    #[test]
    fn duplicate_option_values_are_ambiguous() {
        let mut flow = fonts_mini();
        let edge = flow
            .edges
            .iter()
            .find(|e| matches!(&e.condition, Condition::Option { value, .. } if value == "app"))
            .unwrap()
            .clone();
        flow.edges.push(FlowEdge::new(edge.from.clone(), "fix_screen", edge.condition.clone()));
        let report = validate_flow(&flow);
        assert_eq!(report.codes(), vec![IssueCode::AmbiguousEdges]);
        assert_eq!(report.issues[0].location, edge.from);
    }

    #[test]
    fn structural_problems_are_reported() {
        let mut flow = parse_flow(MINIMAL.as_bytes()).unwrap();
        flow.nodes.push(FlowNode::question("q", "Which [colour]?", "size"));
        flow.edges.push(FlowEdge::new("m1", "q", Condition::EntityPresent { entity: "size".into() }));
        flow.edges.push(FlowEdge::new("e", "m1", Condition::Always));
        let codes = validate_flow(&flow).codes();
        for code in [
            IssueCode::UndeclaredEntity,
            IssueCode::QuestionWithoutAnswer,
            IssueCode::MissingOutgoing,
            IssueCode::EndHasOutgoing,
            IssueCode::AmbiguousEdges,
        ] {
            assert!(codes.contains(&code), "{code} missing from {codes:?}");
        }
    }

    #[test]
    fn serialization_ignores_input_order() {
        let flow = fonts_mini();
        let mut shuffled = flow.clone();
        shuffled.nodes.reverse();
        shuffled.edges.reverse();
        shuffled.entities.reverse();
        assert_eq!(serialize_flow(&flow).unwrap(), serialize_flow(&shuffled).unwrap());
        assert_eq!(validate_flow(&flow), validate_flow(&shuffled));
    }

    #[test]
    fn invalid_flow_does_not_serialize() {
        let mut flow = parse_flow(MINIMAL.as_bytes()).unwrap();
        flow.nodes.push(FlowNode::message("x", "orphan"));
        assert!(matches!(serialize_flow(&flow), Err(FlowError::InvalidFlow(_))));
    }

    #[test]
    fn condition_exclusion() {
        let a = Condition::option("t", "app");
        let b = Condition::option("t", "screen");
        assert!(a.excludes(&b));
        assert!(!a.excludes(&a.clone()));
        assert!(!Condition::Always.excludes(&a));
        assert!(a.excludes(&Condition::EntityAbsent { entity: "t".into() }));
        assert!(!a.excludes(&Condition::EntityAbsent { entity: "u".into() }));
        assert!(
            Condition::EntityPresent { entity: "t".into() }.excludes(&Condition::EntityAbsent { entity: "t".into() })
        );
    }
}
