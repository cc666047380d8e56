use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CompileError;
use crate::flow::{Condition, DialogFlow, EntityDef, FlowEdge, NodeId, NodeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkLimits {
    /// Extra visits allowed per node, so each node appears at most `1 + max_cycle_visits` times.
    pub max_cycle_visits: usize,
    pub max_walks: usize,
}

impl Default for WalkLimits {
    fn default() -> Self {
        WalkLimits { max_cycle_visits: 1, max_walks: 5000 }
    }
}

/// An answer fixed at a question node; `at` indexes the walk's `node_ids`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Binding {
    pub entity: String,
    pub value: String,
    pub at: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Walk {
    pub node_ids: Vec<NodeId>,
    pub bindings: Vec<Binding>,
}

impl Walk {
    pub fn binding_at(&self, position: usize) -> Option<&Binding> {
        self.bindings.iter().find(|b| b.at == position)
    }
}

/// Stand-in answer for an open entity.
pub fn sample_value(entity: &str) -> String {
    format!("sample {entity}")
}

/// The value a user gives at a question on `def` so that `edge` is taken,
/// or `None` when the edge is the "no answer" branch.
fn answer_for(def: &EntityDef, edge: &FlowEdge) -> Option<String> {
    match &edge.condition {
        Condition::Option { entity, value } if *entity == def.name => {
            Some(def.canonical_value(value).unwrap_or(value).to_string())
        }
        Condition::EntityAbsent { entity } if *entity == def.name => None,
        _ => Some(match def.values().first() {
            Some(first) => first.value.clone(),
            None => sample_value(&def.name),
        }),
    }
}

struct Search<'a> {
    flow: &'a DialogFlow,
    out: BTreeMap<&'a str, Vec<&'a FlowEdge>>,
    limit: usize,
    max_walks: usize,
    visits: BTreeMap<&'a str, usize>,
    path: Vec<NodeId>,
    bindings: Vec<Binding>,
    memory: BTreeMap<String, String>,
    walks: Vec<Walk>,
}

impl<'a> Search<'a> {
    fn visit(&mut self, id: &'a str) -> Result<(), CompileError> {
        *self.visits.entry(id).or_default() += 1;
        self.path.push(id.to_string());
        let result = self.expand(id);
        self.path.pop();
        *self.visits.get_mut(id).unwrap() -= 1;
        result
    }

    fn expand(&mut self, id: &'a str) -> Result<(), CompileError> {
        let Some(node) = self.flow.node(id) else { return Ok(()) };
        if let NodeKind::End = node.kind {
            self.walks.push(Walk { node_ids: self.path.clone(), bindings: self.bindings.clone() });
            if self.walks.len() > self.max_walks {
                return Err(CompileError::WalkExplosion { count: self.walks.len() });
            }
            return Ok(());
        }
        let question = match &node.kind {
            NodeKind::Question { entity, .. } => self.flow.entity(entity),
            _ => None,
        };
        let edges = self.out.get(id).cloned().unwrap_or_default();
        for edge in edges {
            if self.visits.get(edge.to.as_str()).copied().unwrap_or(0) >= self.limit {
                continue;
            }
            let answer = question.and_then(|def| answer_for(def, edge).map(|v| (def.name.clone(), v)));
            let previous = answer.as_ref().map(|(e, v)| self.memory.insert(e.clone(), v.clone()));
            let mut result = Ok(());
            if edge.condition.holds(&self.memory) {
                if let Some((entity, value)) = &answer {
                    let at = self.path.len() - 1;
                    self.bindings.push(Binding { entity: entity.clone(), value: value.clone(), at });
                }
                result = self.visit(&edge.to);
                if answer.is_some() {
                    self.bindings.pop();
                }
            }
            self.restore(&answer, &previous);
            result?;
        }
        Ok(())
    }

    fn restore(&mut self, answer: &Option<(String, String)>, previous: &Option<Option<String>>) {
        if let (Some((entity, _)), Some(previous)) = (answer, previous) {
            match previous {
                Some(old) => self.memory.insert(entity.clone(), old.clone()),
                None => self.memory.remove(entity),
            };
        }
    }
}

/// Every start-to-end path with each node visited at most `1 + max_cycle_visits`
/// times, depth first over edges in canonical order.
pub fn enumerate_walks(flow: &DialogFlow, limits: WalkLimits) -> Result<Vec<Walk>, CompileError> {
    if limits.max_walks == 0 {
        return Err(CompileError::InvalidLimits);
    }
    let mut edges: Vec<&FlowEdge> = flow.edges.iter().collect();
    edges.sort_by(|a, b| (&a.from, &a.to, &a.condition).cmp(&(&b.from, &b.to, &b.condition)));
    let mut out: BTreeMap<&str, Vec<&FlowEdge>> = BTreeMap::new();
    for edge in edges {
        out.entry(edge.from.as_str()).or_default().push(edge);
    }
    let mut search = Search {
        flow,
        out,
        limit: 1 + limits.max_cycle_visits,
        max_walks: limits.max_walks,
        visits: BTreeMap::new(),
        path: Vec::new(),
        bindings: Vec::new(),
        memory: BTreeMap::new(),
        walks: Vec::new(),
    };
    if flow.node(&flow.start).is_some() {
        search.visit(&flow.start)?;
    }
    if search.walks.is_empty() {
        return Err(CompileError::NoEndReachable);
    }
    Ok(search.walks)
}
