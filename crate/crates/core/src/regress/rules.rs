use std::collections::BTreeMap;

use super::{DialogManager, DmFailure, RegressError, ReplayAction};
use crate::compile::{build_catalog, Catalog, TemplateId};
use crate::entity::{ground, substitute, understand, EntityMemory};
use crate::flow::{Condition, DialogFlow, NodeId, NodeKind};

/// Steps a single turn may take through non-question nodes.
const MAX_STEPS: usize = 100;

/// The flow itself run as a rule-based dialog manager: follow the first edge
/// whose condition holds, stop at questions, re-ask when no answer fits.
#[derive(Debug, Clone)]
pub struct FlowDm {
    flow: DialogFlow,
    catalog: Catalog,
    node_templates: BTreeMap<NodeId, TemplateId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowState {
    /// Question waiting for its answer.
    pub at: Option<NodeId>,
    pub memory: EntityMemory,
    pub turn: usize,
    pub ended: bool,
}

impl FlowDm {
    pub fn new(flow: DialogFlow) -> FlowDm {
        let templates = build_catalog(&flow);
        FlowDm { flow, catalog: templates.catalog, node_templates: templates.node_templates }
    }

    /// Uses template ids from `catalog`, which must know every node's action.
    pub fn with_catalog(flow: DialogFlow, catalog: &Catalog) -> Result<FlowDm, RegressError> {
        let own = build_catalog(&flow);
        let mut node_templates = BTreeMap::new();
        for (node, id) in own.node_templates {
            let key = own.catalog.templates[id].key();
            let mapped = catalog
                .find(&key)
                .ok_or_else(|| RegressError::Rules(format!("node `{node}` has no template in the catalog")))?;
            node_templates.insert(node, mapped);
        }
        Ok(FlowDm { flow, catalog: catalog.clone(), node_templates })
    }

    pub fn flow(&self) -> &DialogFlow {
        &self.flow
    }

    fn emit(&self, node: &str, memory: &EntityMemory) -> Result<ReplayAction, DmFailure> {
        let id = self.node_templates[node];
        let text = substitute(&self.catalog.templates[id], memory).map_err(|e| DmFailure(e.to_string()))?;
        Ok(ReplayAction { template_id: id, text })
    }

    /// First edge out of `node` whose condition holds; guarded edges before `always`.
    fn next<'a>(&'a self, node: &'a str, memory: &EntityMemory) -> Option<&'a str> {
        let values = memory.values();
        let mut edges: Vec<_> = self.flow.outgoing(node).collect();
        edges.sort_by_key(|e| matches!(e.condition, Condition::Always));
        edges.into_iter().find(|e| e.condition.holds(&values)).map(|e| e.to.as_str())
    }

    fn run(&self, from: &str, mut state: FlowState) -> Result<(Vec<ReplayAction>, FlowState), DmFailure> {
        let mut actions = Vec::new();
        let mut node = from.to_string();
        for _ in 0..MAX_STEPS {
            let current = self.flow.node(&node).ok_or_else(|| DmFailure(format!("unknown node `{node}`")))?;
            actions.push(self.emit(&node, &state.memory)?);
            match current.kind {
                NodeKind::End => {
                    state.ended = true;
                    state.at = None;
                    return Ok((actions, state));
                }
                NodeKind::Question { .. } => {
                    state.at = Some(node);
                    return Ok((actions, state));
                }
                _ => {}
            }
            node = self
                .next(&node, &state.memory)
                .ok_or_else(|| DmFailure(format!("no edge out of `{node}` applies")))?
                .to_string();
        }
        Err(DmFailure(format!("no question within {MAX_STEPS} steps")))
    }
}

impl DialogManager for FlowDm {
    type State = FlowState;

    fn start(&self) -> Result<(Vec<ReplayAction>, FlowState), DmFailure> {
        let state = FlowState { at: None, memory: EntityMemory::new(), turn: 0, ended: false };
        self.run(&self.flow.start, state)
    }

    fn respond(&self, state: &FlowState, utterance: &str) -> Result<(Vec<ReplayAction>, FlowState), DmFailure> {
        if state.ended {
            return Ok((Vec::new(), state.clone()));
        }
        let Some(question) = state.at.as_deref() else {
            return Err(DmFailure("not waiting for an answer".into()));
        };
        let expected = match &self.flow.node(question).map(|n| &n.kind) {
            Some(NodeKind::Question { entity, .. }) => Some(entity.as_str()),
            _ => None,
        };
        let mut next = state.clone();
        next.turn += 1;
        let mentions = understand(utterance, &self.flow.entities, expected);
        next.memory =
            ground(&mentions, &state.memory, next.turn, &self.flow.entities).map_err(|e| DmFailure(e.to_string()))?;
        match self.next(question, &next.memory) {
            Some(to) => {
                let to = to.to_string();
                self.run(&to, next)
            }
            None => Ok((vec![self.emit(question, &next.memory)?], next)),
        }
    }
}
