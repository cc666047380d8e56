use std::collections::{BTreeMap, VecDeque};

use super::{ActionTemplate, CompileError, TemplateAction, TemplateId, TrainingDialog};
use crate::flow::{Condition, DialogFlow, EntityDef, FlowEdge, FlowNode, NodeKind, SCHEMA_VERSION};

/// What separates one system action from the next.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Label {
    Next,
    Answer(String),
    Any,
    NoAnswer,
}

struct TrieNode {
    template: TemplateId,
    dialog: String,
    children: BTreeMap<Label, usize>,
}

/// Flattens a dialog into `(template, label to the following action)` steps.
fn steps(
    dialog: &TrainingDialog,
    templates: &[ActionTemplate],
    entities: &[EntityDef],
) -> Result<Vec<(TemplateId, Label)>, CompileError> {
    let malformed = |reason: String| CompileError::MalformedDialog { id: dialog.id.clone(), reason };
    let mut out: Vec<(TemplateId, Label)> = Vec::new();
    let mut awaiting: Option<&ActionTemplate> = None;
    for (t, turn) in dialog.turns.iter().enumerate() {
        if let Some(user) = &turn.user {
            let Some(question) = awaiting.take() else {
                if out.is_empty() {
                    // a user utterance opening the dialog carries no label
                    continue;
                }
                return Err(malformed(format!("turn {t}: user turn without a pending question")));
            };
            let label = match &question.entity {
                None => Label::Next,
                Some(entity) => match user.mentions.iter().rev().find(|m| &m.entity == entity) {
                    None => Label::NoAnswer,
                    Some(m) => {
                        let def = entities
                            .iter()
                            .find(|d| &d.name == entity)
                            .ok_or_else(|| malformed(format!("turn {t}: undeclared entity `{entity}`")))?;
                        if def.is_open() {
                            Label::Any
                        } else {
                            let value = def.canonical_value(&m.value).ok_or_else(|| {
                                malformed(format!("turn {t}: `{}` is not a value of `{entity}`", m.value))
                            })?;
                            Label::Answer(value.to_string())
                        }
                    }
                },
            };
            out.last_mut().expect("question precedes answer").1 = label;
        } else if awaiting.is_some() {
            return Err(malformed(format!("turn {t}: question left unanswered")));
        }
        for action in &turn.system {
            if awaiting.is_some() {
                return Err(malformed(format!("turn {t}: action after a question")));
            }
            let template = templates
                .iter()
                .find(|tp| tp.id == action.template_id)
                .ok_or(CompileError::UnknownTemplate(action.template_id))?;
            if out.last().is_some_and(|(id, _)| templates.iter().any(|tp| tp.id == *id && tp.is_end())) {
                return Err(malformed(format!("turn {t}: action after the end")));
            }
            out.push((template.id, Label::Next));
            if template.awaits_user {
                awaiting = Some(template);
            }
        }
    }
    let ends = out.last().is_some_and(|(id, _)| templates.iter().any(|tp| tp.id == *id && tp.is_end()));
    if !ends {
        return Err(malformed("dialog does not finish with the end action".into()));
    }
    Ok(out)
}

fn node_kind(template: &ActionTemplate) -> NodeKind {
    match (&template.action, &template.entity) {
        (TemplateAction::Text { text }, Some(entity)) if template.awaits_user => {
            NodeKind::Question { text: text.clone(), entity: entity.clone() }
        }
        (TemplateAction::Text { text }, _) => NodeKind::Message { text: text.clone() },
        (TemplateAction::Api { api_name, args }, _) => NodeKind::Api { api_name: api_name.clone(), args: args.clone() },
        (TemplateAction::End, _) => NodeKind::End,
    }
}

fn condition(label: &Label, template: &ActionTemplate) -> Condition {
    let entity = || template.entity.clone().unwrap_or_default();
    match label {
        Label::Next => Condition::Always,
        Label::Answer(value) => Condition::Option { entity: entity(), value: value.clone() },
        Label::Any => Condition::EntityPresent { entity: entity() },
        Label::NoAnswer => Condition::EntityAbsent { entity: entity() },
    }
}

/// Rebuilds a flow from complete training dialogs: a prefix tree over
/// `(template, answer)` steps whose identical subtrees are then shared.
pub fn aggregate_to_flow(
    dialogs: &[TrainingDialog],
    templates: &[ActionTemplate],
    entities: &[EntityDef],
) -> Result<DialogFlow, CompileError> {
    let mut trie: Vec<TrieNode> = Vec::new();
    let mut root: Option<usize> = None;
    for dialog in dialogs {
        let steps = steps(dialog, templates, entities)?;
        let mut parent: Option<(usize, Label)> = None;
        for (position, (template, label)) in steps.into_iter().enumerate() {
            let existing = match &parent {
                None => root,
                Some((p, l)) => trie[*p].children.get(l).copied(),
            };
            let node = match existing {
                Some(n) if trie[n].template == template => n,
                Some(n) => {
                    return Err(CompileError::InconsistentDialogs {
                        first: trie[n].dialog.clone(),
                        second: dialog.id.clone(),
                        detail: format!("action {position}: template {} vs {template}", trie[n].template),
                    })
                }
                None => {
                    trie.push(TrieNode { template, dialog: dialog.id.clone(), children: BTreeMap::new() });
                    let n = trie.len() - 1;
                    match &parent {
                        None => root = Some(n),
                        Some((p, l)) => {
                            trie[*p].children.insert(l.clone(), n);
                        }
                    }
                    n
                }
            };
            parent = Some((node, label));
        }
    }
    let root = root
        .ok_or_else(|| CompileError::MalformedDialog { id: String::new(), reason: "no dialogs to aggregate".into() })?;

    // Children are always created after their parent, so a reverse sweep is bottom-up.
    let mut class_of = vec![0usize; trie.len()];
    let mut classes: BTreeMap<(TemplateId, Vec<(Label, usize)>), usize> = BTreeMap::new();
    let mut representatives: Vec<usize> = Vec::new();
    for n in (0..trie.len()).rev() {
        let signature: Vec<(Label, usize)> = trie[n].children.iter().map(|(l, c)| (l.clone(), class_of[*c])).collect();
        let next = classes.len();
        let class = *classes.entry((trie[n].template, signature)).or_insert(next);
        if class == representatives.len() {
            representatives.push(n);
        }
        class_of[n] = class;
    }

    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    let mut queue = VecDeque::from([class_of[root]]);
    let mut order = Vec::new();
    while let Some(class) = queue.pop_front() {
        if names.contains_key(&class) {
            continue;
        }
        names.insert(class, String::new());
        order.push(class);
        queue.extend(trie[representatives[class]].children.values().map(|c| class_of[*c]));
    }
    for (i, class) in order.iter().enumerate() {
        names.insert(*class, format!("n{i:02}"));
    }

    let template_of = |id: TemplateId| templates.iter().find(|t| t.id == id).expect("checked while flattening");
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for class in &order {
        let trie_node = &trie[representatives[*class]];
        let template = template_of(trie_node.template);
        nodes.push(FlowNode { id: names[class].clone(), kind: node_kind(template) });
        for (label, child) in &trie_node.children {
            edges.push(FlowEdge::new(
                names[class].clone(),
                names[&class_of[*child]].clone(),
                condition(label, template),
            ));
        }
    }
    let mut flow = DialogFlow {
        name: "aggregated".into(),
        schema_version: SCHEMA_VERSION,
        start: names[&class_of[root]].clone(),
        entities: entities.to_vec(),
        nodes,
        edges,
    };
    flow.canonicalize();
    let report = crate::flow::validate_flow(&flow);
    if report.has_errors() {
        return Err(CompileError::AggregateInvalid(report));
    }
    Ok(flow)
}
