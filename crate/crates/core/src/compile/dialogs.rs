use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    build_catalog, CompileError, DialogSource, FlowTemplates, SystemAction, TrainingDialog, Turn, UserTurn, Walk,
};
use crate::entity::{ground, EntityMemory, Mention};
use crate::flow::DialogFlow;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Extra dialogs per option binding, each answering with one synonym.
    pub synonyms_per_option: usize,
}

/// One dialog per walk, followed by its synonym variants. Turn 0 holds the
/// opening system actions; each question answer opens a new turn.
pub fn walks_to_training_dialogs(
    flow: &DialogFlow,
    walks: &[Walk],
    augmentation: Augmentation,
) -> Result<Vec<TrainingDialog>, CompileError> {
    let templates = build_catalog(flow);
    let name = if flow.name.is_empty() { "flow" } else { flow.name.as_str() };
    let mut dialogs = Vec::new();
    for (i, walk) in walks.iter().enumerate() {
        let base = format!("{name}/w{:04}", i + 1);
        dialogs.push(synthesize(flow, &templates, walk, base.clone(), &BTreeMap::new())?);
        for (b, binding) in walk.bindings.iter().enumerate() {
            let Some(option) =
                flow.entity(&binding.entity).and_then(|def| def.values().iter().find(|v| v.value == binding.value))
            else {
                continue;
            };
            for (s, synonym) in option.synonyms.iter().take(augmentation.synonyms_per_option).enumerate() {
                let surfaces = BTreeMap::from([(b, synonym.as_str())]);
                dialogs.push(synthesize(flow, &templates, walk, format!("{base}/b{b}s{s}"), &surfaces)?);
            }
        }
    }
    Ok(dialogs)
}

fn synthesize(
    flow: &DialogFlow,
    templates: &FlowTemplates,
    walk: &Walk,
    id: String,
    surfaces: &BTreeMap<usize, &str>,
) -> Result<TrainingDialog, CompileError> {
    let mut turns = vec![Turn { user: None, system: Vec::new() }];
    let mut memory = EntityMemory::new();
    for (position, node_id) in walk.node_ids.iter().enumerate() {
        let template_id = templates.node_templates[node_id];
        let template = &templates.catalog.templates[template_id];
        let filled_text = crate::entity::substitute(template, &memory)?;
        turns.last_mut().expect("at least one turn").system.push(SystemAction { template_id, filled_text });
        if !template.awaits_user {
            continue;
        }
        let (text, mentions) = match walk.bindings.iter().enumerate().find(|(_, b)| b.at == position) {
            Some((b, binding)) => {
                let text = surfaces.get(&b).copied().unwrap_or(&binding.value).to_string();
                let mention = Mention::whole(&text, &binding.entity, &binding.value);
                (text, mention.into_iter().collect())
            }
            None => (String::new(), Vec::new()),
        };
        memory = ground(&mentions, &memory, turns.len(), &flow.entities)?;
        turns.push(Turn { user: Some(UserTurn { text, mentions }), system: Vec::new() });
    }
    Ok(TrainingDialog { id, source: DialogSource::Compiled, turns })
}
