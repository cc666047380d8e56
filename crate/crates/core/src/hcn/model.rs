use serde::{Deserialize, Serialize};

use super::network::{cell_forward, mean_embedding, output_logits, Encoded, Params};
use super::{apply_mask, argmax, softmax, Featurizer, HcnError, Hyperparams};
use crate::compile::{Catalog, TemplateId};
use crate::entity::{ground, substitute, understand, EntityMemory, Mention};
use crate::flow::EntityDef;
use crate::scalar::Scalar;

/// A turn that chains this many actions without a question is an error.
pub const MAX_ACTIONS_PER_TURN: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel<S> {
    pub version: u64,
    pub hyper: Hyperparams,
    pub featurizer: Featurizer,
    pub entities: Vec<EntityDef>,
    pub catalog: Catalog,
    pub params: Params<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogState<S> {
    pub memory: EntityMemory,
    pub hidden: Vec<S>,
    pub cell: Vec<S>,
    pub last_action: Option<TemplateId>,
    pub turn: usize,
    /// Entity asked for by the last question, if any.
    pub expected: Option<String>,
    pub ended: bool,
}

impl<S: Scalar> DialogState<S> {
    pub fn new(hidden: usize) -> Self {
        DialogState {
            memory: EntityMemory::new(),
            hidden: vec![S::zero(); hidden],
            cell: vec![S::zero(); hidden],
            last_action: None,
            turn: 0,
            expected: None,
            ended: false,
        }
    }
}

/// One selected system action with the evidence behind the choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emitted {
    pub template_id: TemplateId,
    pub filled_text: String,
    /// Masked probability of the selected template.
    pub probability: f64,
    /// Unmasked distribution over all templates.
    pub distribution: Vec<f64>,
    pub allowed: Vec<TemplateId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<S> {
    pub utterance_embedding: Vec<S>,
    pub bow: Vec<S>,
    pub entity_flags: Vec<S>,
    pub last_action: Vec<S>,
}

impl<S: Scalar> FeatureVector<S> {
    pub fn concat(&self) -> Vec<S> {
        [&self.utterance_embedding[..], &self.bow, &self.entity_flags, &self.last_action].concat()
    }
}

pub fn featurize_turn<S: Scalar>(
    featurizer: &Featurizer,
    model: &PolicyModel<S>,
    utterance: &str,
    memory: &EntityMemory,
    last_action: Option<TemplateId>,
) -> FeatureVector<S> {
    let x = featurizer.encode(utterance, memory, last_action);
    let one_hot = |len: usize, set: &[usize]| {
        let mut v = vec![S::zero(); len];
        set.iter().for_each(|&i| v[i] = S::one());
        v
    };
    FeatureVector {
        utterance_embedding: mean_embedding(&model.params, &x.tokens),
        bow: one_hot(featurizer.vocab_size(), &x.bow),
        entity_flags: one_hot(featurizer.entity_order.len(), &x.entities),
        last_action: one_hot(featurizer.template_count + 1, &[x.last_action]),
    }
}

impl<S: Scalar> PolicyModel<S> {
    pub fn initial_state(&self) -> DialogState<S> {
        DialogState::new(self.params.shape.hidden)
    }

    pub fn template_count(&self) -> usize {
        self.catalog.len()
    }

    /// One recurrent step. Returns the unmasked distribution and the state
    /// with the new hidden and cell vectors; the model is not touched.
    pub fn forward(&self, x: &Encoded, state: &DialogState<S>) -> Result<(Vec<S>, DialogState<S>), HcnError> {
        let cache = cell_forward(&self.params, x, &state.hidden, &state.cell);
        let logits = output_logits(&self.params, &cache.h);
        if !logits.iter().chain(&cache.c).all(|v| v.is_finite()) {
            return Err(HcnError::NonFiniteActivation);
        }
        let mut next = state.clone();
        next.hidden = cache.h;
        next.cell = cache.c;
        Ok((softmax(&logits), next))
    }

    /// The system's opening turn, before the user has said anything.
    pub fn start(&self) -> Result<(Vec<Emitted>, DialogState<S>), HcnError> {
        self.act(self.initial_state(), "")
    }

    pub fn respond(&self, state: &DialogState<S>, utterance: &str) -> Result<(Vec<Emitted>, DialogState<S>), HcnError> {
        let mentions = understand(utterance, &self.entities, state.expected.as_deref());
        self.respond_grounded(state, utterance, &mentions)
    }

    /// Like [`respond`](Self::respond) with the mentions supplied rather than detected.
    pub fn respond_grounded(
        &self,
        state: &DialogState<S>,
        utterance: &str,
        mentions: &[Mention],
    ) -> Result<(Vec<Emitted>, DialogState<S>), HcnError> {
        if state.ended {
            return Ok((Vec::new(), state.clone()));
        }
        let mut next = state.clone();
        next.turn += 1;
        next.memory = ground(mentions, &state.memory, next.turn, &self.entities)?;
        self.act(next, utterance)
    }

    /// Advances `state` through one recorded turn as if the model had chosen
    /// `actions` itself. `user` is `None` for the opening turn. Ids the model
    /// does not know are fed as "no previous action".
    pub fn observe(
        &self,
        state: &DialogState<S>,
        user: Option<(&str, &[Mention])>,
        actions: &[TemplateId],
    ) -> Result<DialogState<S>, HcnError> {
        let mut state = state.clone();
        let mut text = "";
        if let Some((utterance, mentions)) = user {
            state.turn += 1;
            state.memory = ground(mentions, &state.memory, state.turn, &self.entities)?;
            text = utterance;
        }
        for (k, &id) in actions.iter().enumerate() {
            let x = self.featurizer.encode(if k == 0 { text } else { "" }, &state.memory, state.last_action);
            state = self.forward(&x, &state)?.1;
            state.last_action = Some(id);
            if let Some(template) = self.catalog.template(id) {
                if template.is_end() {
                    state.ended = true;
                    state.expected = None;
                } else if template.awaits_user {
                    state.expected = template.entity.clone();
                }
            }
        }
        Ok(state)
    }

    /// Lets the model finish a system turn that was started by someone else.
    pub fn continue_turn(&self, state: &DialogState<S>) -> Result<(Vec<Emitted>, DialogState<S>), HcnError> {
        if state.ended {
            return Ok((Vec::new(), state.clone()));
        }
        self.act(state.clone(), "")
    }

    fn act(&self, mut state: DialogState<S>, utterance: &str) -> Result<(Vec<Emitted>, DialogState<S>), HcnError> {
        let mut out = Vec::new();
        for k in 0..MAX_ACTIONS_PER_TURN {
            let text = if k == 0 { utterance } else { "" };
            let x = self.featurizer.encode(text, &state.memory, state.last_action);
            let (distribution, next) = self.forward(&x, &state)?;
            state = next;
            let allowed = self.catalog.allowed(&state.memory);
            let masked = apply_mask(&distribution, &allowed)?;
            let allowed: Vec<TemplateId> = allowed.into_iter().collect();
            let id = argmax(&masked, &allowed).ok_or(HcnError::EmptyMask)?;
            let template = &self.catalog.templates[id];
            out.push(Emitted {
                template_id: id,
                filled_text: substitute(template, &state.memory)?,
                probability: masked[id].as_f64(),
                distribution: distribution.iter().map(|p| p.as_f64()).collect(),
                allowed,
            });
            state.last_action = Some(id);
            if template.is_end() {
                state.ended = true;
                state.expected = None;
                return Ok((out, state));
            }
            if template.awaits_user {
                state.expected = template.entity.clone();
                return Ok((out, state));
            }
        }
        Err(HcnError::ActionLoop(MAX_ACTIONS_PER_TURN))
    }
}
