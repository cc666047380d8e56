use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::network::{Encoded, Shape};
use super::HcnError;
use crate::compile::{ActionTemplate, TemplateId, TrainingDialog};
use crate::entity::{token_strings, EntityMemory};
use crate::flow::EntityDef;

/// Reserved vocabulary entry for unseen tokens, always at index 0.
pub const OOV: &str = "<oov>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    /// `vocab[0]` is [`OOV`]; the rest is sorted.
    pub vocab: Vec<String>,
    pub embedding_dim: usize,
    pub entity_order: Vec<String>,
    pub template_count: usize,
}

impl Featurizer {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_index(&self, token: &str) -> usize {
        self.vocab[1..].binary_search_by(|v| v.as_str().cmp(token)).map_or(0, |i| i + 1)
    }

    pub fn entity_index(&self, entity: &str) -> Option<usize> {
        self.entity_order.binary_search_by(|e| e.as_str().cmp(entity)).ok()
    }

    pub fn shape(&self, hidden: usize) -> Shape {
        Shape {
            vocab: self.vocab.len(),
            embedding: self.embedding_dim,
            entities: self.entity_order.len(),
            templates: self.template_count,
            hidden,
        }
    }

    pub fn encode(&self, utterance: &str, memory: &EntityMemory, last_action: Option<TemplateId>) -> Encoded {
        let tokens: Vec<usize> = token_strings(utterance).iter().map(|t| self.token_index(t)).collect();
        let bow: BTreeSet<usize> = tokens.iter().copied().collect();
        let entities = memory.iter().filter_map(|(name, _)| self.entity_index(name)).collect::<BTreeSet<_>>();
        Encoded {
            tokens,
            bow: bow.into_iter().collect(),
            entities: entities.into_iter().collect(),
            last_action: last_action.filter(|&a| a < self.template_count).unwrap_or(self.template_count),
        }
    }
}

/// Vocabulary from every user utterance, entity order from the declared entities.
pub fn build_featurizer(
    dialogs: &[TrainingDialog],
    entities: &[EntityDef],
    templates: &[ActionTemplate],
    embedding_dim: usize,
) -> Result<Featurizer, HcnError> {
    if dialogs.is_empty() {
        return Err(HcnError::EmptyCorpus);
    }
    let words: BTreeSet<String> = dialogs
        .iter()
        .flat_map(|d| d.turns.iter())
        .filter_map(|t| t.user.as_ref())
        .flat_map(|u| token_strings(&u.text))
        .collect();
    let mut vocab = vec![OOV.to_string()];
    vocab.extend(words);
    let mut entity_order: Vec<String> = entities.iter().map(|e| e.name.clone()).collect();
    entity_order.sort();
    entity_order.dedup();
    Ok(Featurizer { vocab, embedding_dim, entity_order, template_count: templates.len() })
}
