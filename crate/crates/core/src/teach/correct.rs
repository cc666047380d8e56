use serde::{Deserialize, Serialize};

use super::{Correction, CorrectionKind, LogDialog, TeachError};
use crate::compile::{Catalog, DialogSource, SystemAction, TemplateId, TrainingDialog, Turn, UserTurn};
use crate::entity::{ground, substitute, token_strings, EntityMemory, Mention};
use crate::flow::{EntityDef, EntityKind};
use crate::hcn::DialogState;
use crate::Policy;

/// A relabeled action, remembered so a second, different relabel of the same
/// action is noticed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relabel {
    pub turn: usize,
    pub action: usize,
    pub template_id: TemplateId,
}

/// Working copy of a log under correction. The log itself is never touched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectedDialog {
    pub log_id: u64,
    /// Every logged turn, with corrections applied.
    pub turns: Vec<Turn>,
    /// Leading turns that make up the training dialog.
    pub reviewed: usize,
    pub relabels: Vec<Relabel>,
}

impl CorrectedDialog {
    pub fn from_log(log: &LogDialog) -> CorrectedDialog {
        let turns = log
            .turns
            .iter()
            .map(|t| Turn {
                user: t.user.as_ref().map(|text| UserTurn { text: text.clone(), mentions: t.mentions.clone() }),
                system: t
                    .actions
                    .iter()
                    .map(|a| SystemAction { template_id: a.template_id, filled_text: a.text.clone() })
                    .collect(),
            })
            .collect();
        CorrectedDialog { log_id: log.id, turns, reviewed: 0, relabels: Vec::new() }
    }

    pub fn dialog_id(&self) -> String {
        format!("log/{}", self.log_id)
    }

    pub fn training_dialog(&self) -> TrainingDialog {
        TrainingDialog {
            id: self.dialog_id(),
            source: DialogSource::Corrected,
            turns: self.turns[..self.reviewed].to_vec(),
        }
    }

    fn memory_through(&self, turns: usize, entities: &[EntityDef]) -> Result<EntityMemory, TeachError> {
        let mut memory = EntityMemory::new();
        for (t, turn) in self.turns[..turns].iter().enumerate() {
            if let Some(user) = &turn.user {
                memory = ground(&user.mentions, &memory, t, entities)?;
            }
        }
        Ok(memory)
    }

    /// Recurrent state after the first `turns` turns, actions forced.
    fn state_through(&self, model: &Policy, turns: usize) -> Result<DialogState<f64>, TeachError> {
        let mut state = model.initial_state();
        for turn in &self.turns[..turns] {
            state = observe_turn(model, &state, turn, turn.system.len())?;
        }
        Ok(state)
    }
}

fn observe_turn(
    model: &Policy,
    state: &DialogState<f64>,
    turn: &Turn,
    actions: usize,
) -> Result<DialogState<f64>, TeachError> {
    let user = turn.user.as_ref().map(|u| (u.text.as_str(), u.mentions.as_slice()));
    let ids: Vec<TemplateId> = turn.system[..actions].iter().map(|a| a.template_id).collect();
    Ok(model.observe(state, user, &ids)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectionOutcome {
    pub dialog: TrainingDialog,
    pub corrected: CorrectedDialog,
    pub catalog_changed: bool,
    pub entities_changed: bool,
    /// Id of the template a `new_template` correction created or reused.
    pub template_id: Option<TemplateId>,
}

/// Applies one correction on top of the log's current working copy.
///
/// Entity fixes edit the turn's mentions, teach the lexicon the corrected
/// surface form and, when a model is given, let it choose that turn's actions
/// again from the corrected state. Relabels replace one action; the turn's
/// later actions are dropped and, for a template that does not end the turn,
/// the model's continuation is appended. Turns after the corrected one stay
/// out of the training dialog unless confirmed.
pub fn apply_correction(
    log: &LogDialog,
    previous: Option<&CorrectedDialog>,
    correction: &Correction,
    catalog: &mut Catalog,
    entities: &mut [EntityDef],
    model: Option<&Policy>,
) -> Result<CorrectionOutcome, TeachError> {
    if correction.log_id != log.id {
        return Err(TeachError::UnknownLog(correction.log_id));
    }
    let turn = correction.turn_index;
    let invalid = TeachError::InvalidTurn { log: log.id, turn };
    if turn >= log.turns.len() {
        return Err(invalid);
    }
    let mut work = previous.cloned().unwrap_or_else(|| CorrectedDialog::from_log(log));
    let mut outcome_template = None;
    let mut catalog_changed = false;
    let mut entities_changed = false;

    match &correction.kind {
        CorrectionKind::EntityFix { add, remove } => {
            let Some(user) = work.turns[turn].user.clone() else { return Err(invalid) };
            let mut mentions = user.mentions.clone();
            for m in remove {
                let m = normalize(&user.text, m, entities)?;
                mentions.retain(|x| !(x.entity == m.entity && x.start == m.start && x.end == m.end));
            }
            for m in add {
                let m = normalize(&user.text, m, entities)?;
                mentions.retain(|x| !(x.entity == m.entity && x.start < m.end && m.start < x.end));
                entities_changed |= learn_surface(entities, &m)?;
                mentions.push(m);
            }
            mentions.sort();
            work.turns[turn].user = Some(UserTurn { text: user.text.clone(), mentions: mentions.clone() });
            work.relabels.retain(|r| r.turn != turn);
            if let Some(model) = model {
                let state = work.state_through(model, turn)?;
                let (emitted, _) = model.respond_grounded(&state, &user.text, &mentions)?;
                work.turns[turn].system = emitted
                    .into_iter()
                    .map(|e| SystemAction { template_id: e.template_id, filled_text: e.filled_text })
                    .collect();
            }
        }
        CorrectionKind::ActionRelabel { correct_template_id, action_index } => {
            relabel(
                &mut work,
                log.id,
                turn,
                *action_index,
                *correct_template_id,
                correction.supersede,
                catalog,
                entities,
                model,
            )?;
        }
        CorrectionKind::NewTemplate { template, action_index } => {
            template.check(entities)?;
            let before = catalog.len();
            let id = catalog.add_template(template.action.clone(), template.awaits_user, template.entity.clone());
            catalog_changed = catalog.len() > before;
            outcome_template = Some(id);
            relabel(&mut work, log.id, turn, *action_index, id, correction.supersede, catalog, entities, model)?;
        }
    }

    let confirmed = correction.confirm.iter().take_while(|c| **c).count();
    work.reviewed = (turn + 1 + confirmed).min(work.turns.len());
    let dialog = work.training_dialog();
    dialog.check(catalog)?;
    Ok(CorrectionOutcome { dialog, corrected: work, catalog_changed, entities_changed, template_id: outcome_template })
}

/// Fills in the surface text and canonical value of a teacher-supplied mention.
fn normalize(text: &str, m: &Mention, entities: &[EntityDef]) -> Result<Mention, TeachError> {
    let def = entities
        .iter()
        .find(|d| d.name == m.entity)
        .ok_or_else(|| crate::entity::EntityError::UnknownEntity(m.entity.clone()))?;
    let value = match &def.kind {
        EntityKind::Open => m.value.clone(),
        EntityKind::Enum(_) => def
            .canonical_value(&m.value)
            .ok_or_else(|| crate::entity::EntityError::UnknownValue {
                entity: m.entity.clone(),
                value: m.value.clone(),
            })?
            .to_string(),
    };
    Mention::span(text, &m.entity, m.start, m.end, &value)
        .ok_or_else(|| TeachError::InvalidMention(format!("{}..{} does not slice `{text}`", m.start, m.end)))
}

/// Adds the mention's surface as a synonym of its value unless the lexicon
/// already knows it. Returns whether the lexicon changed.
fn learn_surface(entities: &mut [EntityDef], m: &Mention) -> Result<bool, TeachError> {
    let Some(def) = entities.iter_mut().find(|d| d.name == m.entity) else { return Ok(false) };
    let EntityKind::Enum(values) = &mut def.kind else { return Ok(false) };
    let tokens = token_strings(&m.surface);
    if tokens.is_empty() {
        return Err(TeachError::InvalidMention(format!("`{}` has no words", m.surface)));
    }
    let mut known = false;
    for v in values.iter() {
        let same = std::iter::once(&v.value).chain(&v.synonyms).any(|s| token_strings(s) == tokens);
        if same && v.value != m.value {
            return Err(TeachError::ConflictingCorrection(format!(
                "`{}` already means {}={}",
                m.surface, m.entity, v.value
            )));
        }
        known |= same;
    }
    if known {
        return Ok(false);
    }
    let value = values.iter_mut().find(|v| v.value == m.value).expect("value was canonicalized");
    value.synonyms.push(m.surface.trim().to_string());
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn relabel(
    work: &mut CorrectedDialog,
    log: u64,
    turn: usize,
    index: usize,
    id: TemplateId,
    supersede: bool,
    catalog: &Catalog,
    entities: &[EntityDef],
    model: Option<&Policy>,
) -> Result<(), TeachError> {
    let template = catalog.template(id).ok_or(TeachError::UnknownTemplate(id))?;
    if index > work.turns[turn].system.len() {
        return Err(TeachError::InvalidTurn { log, turn });
    }
    if let Some(prior) = work.relabels.iter().find(|r| r.turn == turn && r.action == index) {
        if prior.template_id != id && !supersede {
            return Err(TeachError::ConflictingCorrection(format!(
                "turn {turn} action {index} was already relabeled to template {}; pass supersede to replace it",
                prior.template_id
            )));
        }
    }
    let memory = work.memory_through(turn + 1, entities)?;
    if !catalog.allowed(&memory).contains(&id) {
        return Err(TeachError::MaskViolation { log, turn, template: id });
    }
    let filled = substitute(template, &memory)?;
    let system = &mut work.turns[turn].system;
    system.truncate(index);
    system.push(SystemAction { template_id: id, filled_text: filled });
    if !template.stops_turn() {
        if let Some(model) = model {
            let state = work.state_through(model, turn)?;
            let state = observe_turn(model, &state, &work.turns[turn], index + 1)?;
            // an unfinished turn is still a valid correction
            if let Ok((more, _)) = model.continue_turn(&state) {
                let system = &mut work.turns[turn].system;
                system.extend(
                    more.into_iter().map(|e| SystemAction { template_id: e.template_id, filled_text: e.filled_text }),
                );
            }
        }
    }
    work.relabels.retain(|r| !(r.turn == turn && r.action >= index));
    work.relabels.push(Relabel { turn, action: index, template_id: id });
    Ok(())
}
