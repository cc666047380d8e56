//! Conversion between a rule-based flow and the learned policy's training
//! representation: walk enumeration, training-dialog synthesis, action masks
//! and aggregation of training dialogs back into a flow.

mod aggregate;
mod catalog;
mod dialogs;
mod walks;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{EntityError, EntityMemory, Mention};
use crate::flow::{DialogFlow, NodeId, ValidationReport};

pub use aggregate::aggregate_to_flow;
pub use catalog::{build_catalog, derive_action_masks, FlowTemplates};
pub use dialogs::{walks_to_training_dialogs, Augmentation};
pub use walks::{enumerate_walks, sample_value, Binding, Walk, WalkLimits};

pub type TemplateId = usize;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemplateAction {
    Text {
        text: String,
    },
    Api {
        api_name: String,
        args: Vec<String>,
    },
    /// Closes the conversation; compiled from `end` nodes.
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTemplate {
    pub id: TemplateId,
    #[serde(flatten)]
    pub action: TemplateAction,
    pub awaits_user: bool,
    /// Entity the template asks for, set for question-derived templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
}

impl ActionTemplate {
    pub fn is_end(&self) -> bool {
        matches!(self.action, TemplateAction::End)
    }

    /// Ends the system's part of a turn.
    pub fn stops_turn(&self) -> bool {
        self.awaits_user || self.is_end()
    }

    pub fn text(&self) -> Option<&str> {
        match &self.action {
            TemplateAction::Text { text } => Some(text),
            _ => None,
        }
    }

    /// Identity used to share one template between nodes with the same action.
    pub fn key(&self) -> TemplateKey {
        let action = match &self.action {
            TemplateAction::Text { text } => {
                TemplateAction::Text { text: text.split_whitespace().collect::<Vec<_>>().join(" ") }
            }
            other => other.clone(),
        };
        TemplateKey { action, awaits_user: self.awaits_user, entity: self.entity.clone() }
    }

    /// Entities the rendered action cannot do without.
    pub fn required_entities(&self) -> BTreeSet<String> {
        match &self.action {
            TemplateAction::Text { text } => crate::entity::placeholders(text),
            TemplateAction::Api { args, .. } => args.iter().cloned().collect(),
            TemplateAction::End => BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TemplateKey {
    pub action: TemplateAction,
    pub awaits_user: bool,
    pub entity: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask {
    pub template_id: TemplateId,
    pub requires_present: BTreeSet<String>,
    pub requires_absent: BTreeSet<String>,
    pub requires_values: BTreeSet<(String, String)>,
}

impl ActionMask {
    pub fn open(template_id: TemplateId) -> Self {
        ActionMask { template_id, ..Default::default() }
    }

    pub fn allows(&self, memory: &EntityMemory) -> bool {
        self.requires_present.iter().all(|e| memory.contains(e))
            && self.requires_absent.iter().all(|e| !memory.contains(e))
            && self
                .requires_values
                .iter()
                .all(|(e, v)| memory.get(e).is_some_and(|bound| bound.to_lowercase() == v.to_lowercase()))
    }

    pub fn is_open(&self) -> bool {
        self.requires_present.is_empty() && self.requires_absent.is_empty() && self.requires_values.is_empty()
    }
}

/// Template catalog plus the mask of each template, indexed by template id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub templates: Vec<ActionTemplate>,
    pub masks: Vec<ActionMask>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn template(&self, id: TemplateId) -> Option<&ActionTemplate> {
        self.templates.get(id)
    }

    pub fn allowed(&self, memory: &EntityMemory) -> BTreeSet<TemplateId> {
        self.masks.iter().filter(|m| m.allows(memory)).map(|m| m.template_id).collect()
    }

    pub fn find(&self, key: &TemplateKey) -> Option<TemplateId> {
        self.templates.iter().find(|t| &t.key() == key).map(|t| t.id)
    }

    /// Registers a template with an open mask, or returns the id of an identical one.
    pub fn add_template(&mut self, action: TemplateAction, awaits_user: bool, entity: Option<String>) -> TemplateId {
        let id = self.templates.len();
        let template = ActionTemplate { id, action, awaits_user, entity };
        if let Some(existing) = self.find(&template.key()) {
            return existing;
        }
        self.templates.push(template);
        self.masks.push(ActionMask::open(id));
        id
    }

    /// Folds a freshly compiled catalog into this one, keeping existing ids
    /// stable. Returns the id mapping `incoming id -> merged id`.
    pub fn merge(&mut self, incoming: &Catalog) -> Vec<TemplateId> {
        let mut remap = Vec::with_capacity(incoming.len());
        for template in &incoming.templates {
            let key = template.key();
            let id = match self.find(&key) {
                Some(id) => id,
                None => {
                    let id = self.templates.len();
                    self.templates.push(ActionTemplate { id, ..template.clone() });
                    self.masks.push(ActionMask::open(id));
                    id
                }
            };
            let mut mask = incoming.masks[template.id].clone();
            mask.template_id = id;
            self.masks[id] = mask;
            remap.push(id);
        }
        remap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogSource {
    Compiled,
    Corrected,
    Authored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserTurn {
    pub text: String,
    #[serde(default)]
    pub mentions: Vec<Mention>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemAction {
    pub template_id: TemplateId,
    pub filled_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<UserTurn>,
    pub system: Vec<SystemAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingDialog {
    pub id: String,
    pub source: DialogSource,
    pub turns: Vec<Turn>,
}

impl TrainingDialog {
    pub fn action_count(&self) -> usize {
        self.turns.iter().map(|t| t.system.len()).sum()
    }

    pub fn user_count(&self) -> usize {
        self.turns.iter().filter(|t| t.user.is_some()).count()
    }

    pub fn template_ids(&self) -> impl Iterator<Item = TemplateId> + '_ {
        self.turns.iter().flat_map(|t| t.system.iter().map(|a| a.template_id))
    }

    /// Ends with the catalog's end action.
    pub fn is_complete(&self, catalog: &Catalog) -> bool {
        self.template_ids().last().and_then(|id| catalog.template(id)).is_some_and(ActionTemplate::is_end)
    }

    /// Checks spans and template references against `catalog`.
    pub fn check(&self, catalog: &Catalog) -> Result<(), CompileError> {
        let malformed = |reason: String| CompileError::MalformedDialog { id: self.id.clone(), reason };
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.user.is_none() && turn.system.is_empty() {
                return Err(malformed(format!("turn {i} is empty")));
            }
            if let Some(user) = &turn.user {
                for m in &user.mentions {
                    if !m.slices(&user.text) {
                        return Err(malformed(format!(
                            "turn {i}: mention {}..{} is outside the utterance",
                            m.start, m.end
                        )));
                    }
                }
            }
            for action in &turn.system {
                if catalog.template(action.template_id).is_none() {
                    return Err(CompileError::UnknownTemplate(action.template_id));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("flow is invalid:\n{0}")]
    InvalidFlow(ValidationReport),
    #[error("walk limits must be positive")]
    InvalidLimits,
    #[error("walk enumeration exceeded the limit ({count} walks reached)")]
    WalkExplosion { count: usize },
    #[error("no end node is reachable from start")]
    NoEndReachable,
    #[error("dialogs `{first}` and `{second}` diverge without a distinguishing user input ({detail})")]
    InconsistentDialogs { first: String, second: String, detail: String },
    #[error("dialog `{id}` is malformed: {reason}")]
    MalformedDialog { id: String, reason: String },
    #[error("aggregated flow fails validation:\n{0}")]
    AggregateInvalid(ValidationReport),
    #[error("unknown template id {0}")]
    UnknownTemplate(TemplateId),
    #[error(transparent)]
    Entity(#[from] EntityError),
}

/// Everything produced by compiling one flow.
#[derive(Debug, Clone)]
pub struct CompiledFlow {
    pub catalog: Catalog,
    pub node_templates: BTreeMap<NodeId, TemplateId>,
    pub walks: Vec<Walk>,
    pub dialogs: Vec<TrainingDialog>,
}

pub fn compile(
    flow: &DialogFlow,
    limits: WalkLimits,
    augmentation: Augmentation,
) -> Result<CompiledFlow, CompileError> {
    let report = crate::flow::validate_flow(flow);
    if report.has_errors() {
        return Err(CompileError::InvalidFlow(report));
    }
    let walks = enumerate_walks(flow, limits)?;
    let dialogs = walks_to_training_dialogs(flow, &walks, augmentation)?;
    let FlowTemplates { catalog, node_templates } = build_catalog(flow);
    Ok(CompiledFlow { catalog, node_templates, walks, dialogs })
}

/// Walk signature used to compare flows independently of node naming:
/// the template keys along the walk and the answers given.
pub type WalkSignature = (Vec<TemplateKey>, Vec<(String, String)>);

pub fn walk_signatures(flow: &DialogFlow, limits: WalkLimits) -> Result<BTreeSet<WalkSignature>, CompileError> {
    let FlowTemplates { catalog, node_templates } = build_catalog(flow);
    let walks = enumerate_walks(flow, limits)?;
    Ok(walks
        .iter()
        .map(|w| {
            let keys = w.node_ids.iter().map(|n| catalog.templates[node_templates[n]].key()).collect();
            let answers = w.bindings.iter().map(|b| (b.entity.clone(), b.value.clone())).collect();
            (keys, answers)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity::Source;
    use crate::flow::{Condition, EntityDef, FlowEdge, FlowNode};
    use crate::samples;

    fn chain() -> DialogFlow {
        DialogFlow {
            name: "chain".into(),
            schema_version: 1,
            start: "m1".into(),
            entities: vec![],
            nodes: vec![FlowNode::message("m1", "Hi"), FlowNode::end("e")],
            edges: vec![FlowEdge::new("m1", "e", Condition::Always)],
        }
    }

    fn no_cycles() -> WalkLimits {
        WalkLimits { max_cycle_visits: 0, ..WalkLimits::default() }
    }

    #[test]
    fn fonts_mini_has_four_walks() {
        let walks = enumerate_walks(&samples::fonts_mini(), no_cycles()).unwrap();
        assert_eq!(walks.len(), 4);
        assert!(walks.iter().all(|w| w.node_ids[0] == "ask_target" && w.node_ids.last().unwrap() == "end"));
    }

    #[test]
    fn single_chain_has_one_walk() {
        let walks = enumerate_walks(&chain(), WalkLimits::default()).unwrap();
        assert_eq!(walks, vec![Walk { node_ids: vec!["m1".into(), "e".into()], bindings: vec![] }]);
    }

    #[test]
    fn explosion_and_zero_limits() {
        let flow = samples::fonts_mini();
        let err = enumerate_walks(&flow, WalkLimits { max_cycle_visits: 0, max_walks: 3 }).unwrap_err();
        assert!(matches!(err, CompileError::WalkExplosion { count: 4 }));
        let err = enumerate_walks(&flow, WalkLimits { max_cycle_visits: 0, max_walks: 0 }).unwrap_err();
        assert!(matches!(err, CompileError::InvalidLimits));
    }

    #[test]
    fn cycle_bound_limits_revisits() {
        let flow = samples::support();
        let once = enumerate_walks(&flow, no_cycles()).unwrap();
        let twice = enumerate_walks(&flow, WalkLimits::default()).unwrap();
        assert_eq!(once.len(), 8);
        // a second pass cannot skip the email once the first pass bound it
        assert_eq!(twice.len(), 8 + 8 * 8 - 1);
        for walk in &twice {
            for id in &walk.node_ids {
                assert!(walk.node_ids.iter().filter(|n| *n == id).count() <= 2);
            }
        }
    }

    #[test]
    fn dialogs_from_fonts_mini() {
        let flow = samples::fonts_mini();
        let walks = enumerate_walks(&flow, no_cycles()).unwrap();
        let dialogs = walks_to_training_dialogs(&flow, &walks, Augmentation::default()).unwrap();
        assert_eq!(dialogs.len(), 4);
        assert!(dialogs.iter().all(|d| d.user_count() == 2));
        let screen = dialogs
            .iter()
            .flat_map(|d| d.turns.iter())
            .filter_map(|t| t.user.as_ref())
            .find(|u| u.text == "screen")
            .unwrap();
        let m = &screen.mentions[0];
        assert_eq!((m.entity.as_str(), m.start, m.end, m.value.as_str()), ("target", 0, 6, "screen"));

        let augmented = walks_to_training_dialogs(&flow, &walks, Augmentation { synonyms_per_option: 2 }).unwrap();
        assert_eq!(augmented.len(), 12);
        assert!(augmented.iter().any(|d| d.id == "fonts-mini/w0001/b1s0"));
    }

    #[test]
    fn first_turn_is_the_opening_question() {
        let flow = samples::fonts_mini();
        let compiled = compile(&flow, no_cycles(), Augmentation::default()).unwrap();
        let first = &compiled.dialogs[0];
        assert!(first.turns[0].user.is_none());
        assert_eq!(first.turns[0].system.len(), 1);
        assert!(compiled.catalog.templates[first.turns[0].system[0].template_id].awaits_user);
        assert!(first.is_complete(&compiled.catalog));
        assert_eq!(compiled.catalog.len(), 6);
        assert_eq!(compiled.catalog.masks.len(), 6);
    }

    #[test]
    fn masks_follow_inbound_conditions() {
        let flow = samples::fonts_mini();
        let t = build_catalog(&flow);
        let mask = |node: &str| t.catalog.masks[t.node_templates[node]].clone();
        assert!(mask("ask_target").is_open());
        let screen = mask("fix_screen");
        assert_eq!(screen.requires_values, [("target".to_string(), "screen".to_string())].into());
        assert!(screen.requires_present.is_empty());
        // reached from both fix nodes, which share nothing
        assert!(mask("ask_solved").is_open());
    }

    #[test]
    fn placeholder_requires_presence() {
        let flow = DialogFlow {
            name: "weather".into(),
            schema_version: 1,
            start: "ask".into(),
            entities: vec![EntityDef::open("city")],
            nodes: vec![
                FlowNode::question("ask", "Which city?", "city"),
                FlowNode::message("tell", "the weather of [city]?"),
                FlowNode::end("e"),
            ],
            edges: vec![FlowEdge::new("ask", "tell", Condition::Always), FlowEdge::new("tell", "e", Condition::Always)],
        };
        let masks = derive_action_masks(&flow);
        let t = build_catalog(&flow);
        assert_eq!(masks[t.node_templates["tell"]].requires_present, ["city".to_string()].into());
    }

    #[test]
    fn compiled_labels_respect_masks() {
        for flow in [samples::fonts_mini(), samples::support()] {
            let compiled = compile(&flow, WalkLimits::default(), Augmentation { synonyms_per_option: 1 }).unwrap();
            for dialog in &compiled.dialogs {
                let mut memory = EntityMemory::new();
                for (i, turn) in dialog.turns.iter().enumerate() {
                    if let Some(user) = &turn.user {
                        memory = crate::entity::ground_as(&user.mentions, &memory, i, &flow.entities, Source::Detected)
                            .unwrap();
                    }
                    for action in &turn.system {
                        assert!(compiled.catalog.masks[action.template_id].allows(&memory), "{}", dialog.id);
                    }
                }
            }
        }
    }

    #[test]
    fn round_trip_preserves_walks() {
        for flow in [samples::fonts_mini(), samples::support()] {
            let limits = WalkLimits::default();
            let compiled = compile(&flow, limits, Augmentation::default()).unwrap();
            let back = aggregate_to_flow(&compiled.dialogs, &compiled.catalog.templates, &flow.entities).unwrap();
            assert_eq!(walk_signatures(&back, limits).unwrap(), walk_signatures(&flow, limits).unwrap());
        }
    }

    #[test]
    fn linear_dialog_aggregates_to_a_chain() {
        let flow = chain();
        let compiled = compile(&flow, WalkLimits::default(), Augmentation::default()).unwrap();
        let back = aggregate_to_flow(&compiled.dialogs, &compiled.catalog.templates, &[]).unwrap();
        assert_eq!(back.nodes.len(), 2);
        assert_eq!(enumerate_walks(&back, WalkLimits::default()).unwrap().len(), 1);
    }

    #[test]
    fn diverging_actions_are_inconsistent() {
        let mut catalog = Catalog::default();
        let hi = catalog.add_template(TemplateAction::Text { text: "Hi".into() }, false, None);
        let bye = catalog.add_template(TemplateAction::Text { text: "Bye".into() }, false, None);
        let end = catalog.add_template(TemplateAction::End, false, None);
        let dialog = |id: &str, second: TemplateId| TrainingDialog {
            id: id.into(),
            source: DialogSource::Authored,
            turns: vec![Turn {
                user: None,
                system: [hi, second, end]
                    .iter()
                    .map(|&template_id| SystemAction { template_id, filled_text: String::new() })
                    .collect(),
            }],
        };
        let err = aggregate_to_flow(&[dialog("a", bye), dialog("b", hi)], &catalog.templates, &[]).unwrap_err();
        match err {
            CompileError::InconsistentDialogs { first, second, .. } => {
                assert_eq!((first.as_str(), second.as_str()), ("a", "b"))
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn merge_keeps_existing_ids() {
        let flow = samples::fonts_mini();
        let mut catalog = build_catalog(&flow).catalog;
        let extra = catalog.add_template(TemplateAction::Text { text: "Try Magnifier.".into() }, false, None);
        let remap = catalog.merge(&build_catalog(&flow).catalog);
        assert_eq!(remap, (0..6).collect::<Vec<_>>());
        assert_eq!(catalog.len(), 7);
        assert_eq!(catalog.templates[extra].text(), Some("Try Magnifier."));
    }

    #[test]
    fn compile_is_deterministic() {
        let flow = samples::support();
        let a = compile(&flow, WalkLimits::default(), Augmentation { synonyms_per_option: 1 }).unwrap();
        let b = compile(&flow, WalkLimits::default(), Augmentation { synonyms_per_option: 1 }).unwrap();
        assert_eq!(serde_json::to_string(&a.dialogs).unwrap(), serde_json::to_string(&b.dialogs).unwrap());
        assert_eq!(a.catalog, b.catalog);
    }
}
