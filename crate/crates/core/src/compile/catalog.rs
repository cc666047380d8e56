use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{ActionMask, Catalog, TemplateAction, TemplateId};
use crate::flow::{Condition, DialogFlow, FlowNode, NodeId, NodeKind};

/// Templates of a flow plus the template each node compiles to.
#[derive(Debug, Clone)]
pub struct FlowTemplates {
    pub catalog: Catalog,
    pub node_templates: BTreeMap<NodeId, TemplateId>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Requirement {
    Present(String),
    Absent(String),
    Value(String, String),
}

fn requirements(flow: &DialogFlow, condition: &Condition) -> BTreeSet<Requirement> {
    match condition {
        Condition::Always => BTreeSet::new(),
        Condition::Option { entity, value } => [
            Requirement::Present(entity.clone()),
            Requirement::Value(
                entity.clone(),
                flow.entity(entity).and_then(|d| d.canonical_value(value)).unwrap_or(value).to_string(),
            ),
        ]
        .into(),
        Condition::EntityPresent { entity } => [Requirement::Present(entity.clone())].into(),
        Condition::EntityAbsent { entity } => [Requirement::Absent(entity.clone())].into(),
    }
}

fn node_action(node: &FlowNode) -> (TemplateAction, bool, Option<String>) {
    match &node.kind {
        NodeKind::Message { text } => (TemplateAction::Text { text: text.clone() }, false, None),
        NodeKind::Question { text, entity } => {
            (TemplateAction::Text { text: text.clone() }, true, Some(entity.clone()))
        }
        NodeKind::Api { api_name, args } => {
            (TemplateAction::Api { api_name: api_name.clone(), args: args.clone() }, false, None)
        }
        NodeKind::End => (TemplateAction::End, false, None),
    }
}

/// Nodes in breadth-first order from start, then any unreachable ones by id.
fn node_order(flow: &DialogFlow) -> Vec<&FlowNode> {
    let mut edges: Vec<_> = flow.edges.iter().collect();
    edges.sort_by(|a, b| (&a.from, &a.to, &a.condition).cmp(&(&b.from, &b.to, &b.condition)));
    let mut seen = BTreeSet::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::from([flow.start.as_str()]);
    while let Some(id) = queue.pop_front() {
        if !seen.insert(id) {
            continue;
        }
        if let Some(node) = flow.node(id) {
            order.push(node);
        }
        queue.extend(edges.iter().filter(|e| e.from == id).map(|e| e.to.as_str()));
    }
    let mut rest: Vec<_> = flow.nodes.iter().filter(|n| !seen.contains(n.id.as_str())).collect();
    rest.sort_by(|a, b| a.id.cmp(&b.id));
    order.extend(rest);
    order
}

/// Builds the template catalog of a flow. Nodes with the same action share a
/// template; ids follow the breadth-first order of first appearance.
pub fn build_catalog(flow: &DialogFlow) -> FlowTemplates {
    let mut catalog = Catalog::default();
    let mut node_templates = BTreeMap::new();
    let mut sources: Vec<Vec<&str>> = Vec::new();
    for node in node_order(flow) {
        let (action, awaits_user, entity) = node_action(node);
        let id = catalog.add_template(action, awaits_user, entity);
        if id == sources.len() {
            sources.push(Vec::new());
        }
        sources[id].push(&node.id);
        node_templates.insert(node.id.clone(), id);
    }

    for (id, nodes) in sources.iter().enumerate() {
        let mut common: Option<BTreeSet<Requirement>> = None;
        for node in nodes {
            let mut inbound: Vec<BTreeSet<Requirement>> =
                flow.edges.iter().filter(|e| e.to == *node).map(|e| requirements(flow, &e.condition)).collect();
            if *node == flow.start || inbound.is_empty() {
                inbound.push(BTreeSet::new());
            }
            for set in inbound {
                common = Some(match common {
                    None => set,
                    Some(acc) => acc.intersection(&set).cloned().collect(),
                });
            }
        }
        let mut mask = ActionMask::open(id);
        for req in common.unwrap_or_default() {
            match req {
                Requirement::Present(e) => {
                    mask.requires_present.insert(e);
                }
                Requirement::Absent(e) => {
                    mask.requires_absent.insert(e);
                }
                Requirement::Value(e, v) => {
                    mask.requires_values.insert((e, v));
                }
            }
        }
        mask.requires_present.extend(catalog.templates[id].required_entities());
        let valued: BTreeSet<&String> = mask.requires_values.iter().map(|(e, _)| e).collect();
        mask.requires_present.retain(|e| !valued.contains(e));
        catalog.masks[id] = mask;
    }
    FlowTemplates { catalog, node_templates }
}

/// One mask per template, in template id order.
pub fn derive_action_masks(flow: &DialogFlow) -> Vec<ActionMask> {
    build_catalog(flow).catalog.masks
}
