//! Entity detection, grounding into entity memory, option generalization and
//! template substitution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compile::{ActionTemplate, TemplateAction};
use crate::flow::{EntityDef, EntityKind, EnumValue};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EntityError {
    #[error("mention names undeclared entity `{0}`")]
    UnknownEntity(String),
    #[error("`{value}` is not a declared value of entity `{entity}`")]
    UnknownValue { entity: String, value: String },
    #[error("template needs entity `{0}` which is not in memory")]
    MissingEntity(String),
    #[error("malformed template text: {0}")]
    Template(#[from] TemplateSyntaxError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unterminated placeholder starting at byte {0}")]
pub struct TemplateSyntaxError(pub usize);

/// One lower-cased token and its byte span in the original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lower-cases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                tokens.push(Token { text: text[s..i].to_lowercase(), start: s, end: i });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(Token { text: text[s..].to_lowercase(), start: s, end: text.len() });
    }
    tokens
}

pub fn token_strings(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.text).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Placeholder(String),
}

/// Splits template text into literals and `[entity]` placeholders; `[[` is a literal `[`.
pub fn parse_template(text: &str) -> Result<Vec<Segment>, TemplateSyntaxError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = text;
    let mut offset = 0;
    while let Some(pos) = rest.find('[') {
        literal.push_str(&rest[..pos]);
        let after = &rest[pos + 1..];
        if let Some(tail) = after.strip_prefix('[') {
            literal.push('[');
            offset += pos + 2;
            rest = tail;
            continue;
        }
        let close = after.find(']').ok_or(TemplateSyntaxError(offset + pos))?;
        let name = &after[..close];
        if name.is_empty() || name.contains('[') {
            return Err(TemplateSyntaxError(offset + pos));
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(std::mem::take(&mut literal)));
        }
        segments.push(Segment::Placeholder(name.to_string()));
        offset += pos + 1 + close + 1;
        rest = &after[close + 1..];
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

pub fn placeholders(text: &str) -> BTreeSet<String> {
    parse_template(text)
        .unwrap_or_default()
        .into_iter()
        .filter_map(|s| match s {
            Segment::Placeholder(name) => Some(name),
            Segment::Literal(_) => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub entity: String,
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub surface: String,
    pub value: String,
}

impl Mention {
    /// A mention covering `utterance[start..end]`.
    pub fn span(utterance: &str, entity: &str, start: usize, end: usize, value: &str) -> Option<Mention> {
        if start >= end || end > utterance.len() {
            return None;
        }
        let surface = utterance.get(start..end)?;
        Some(Mention { entity: entity.to_string(), start, end, surface: surface.to_string(), value: value.to_string() })
    }

    pub fn whole(utterance: &str, entity: &str, value: &str) -> Option<Mention> {
        let trimmed = utterance.trim();
        if trimmed.is_empty() {
            return None;
        }
        let start = utterance.len() - utterance.trim_start().len();
        Mention::span(utterance, entity, start, start + trimmed.len(), value)
    }

    pub fn slices(&self, utterance: &str) -> bool {
        self.start < self.end && utterance.get(self.start..self.end) == Some(self.surface.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Detected,
    Corrected,
    Api,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grounding {
    pub value: String,
    pub turn: usize,
    pub source: Source,
}

/// Grounded entity values for one conversation, last write wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityMemory {
    slots: BTreeMap<String, Grounding>,
}

impl EntityMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, entity: &str) -> Option<&str> {
        self.slots.get(entity).map(|g| g.value.as_str())
    }

    pub fn grounding(&self, entity: &str) -> Option<&Grounding> {
        self.slots.get(entity)
    }

    pub fn contains(&self, entity: &str) -> bool {
        self.slots.contains_key(entity)
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn values(&self) -> BTreeMap<String, String> {
        self.slots.iter().map(|(k, g)| (k.clone(), g.value.clone())).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grounding)> {
        self.slots.iter().map(|(k, g)| (k.as_str(), g))
    }

    pub fn set(&mut self, entity: impl Into<String>, value: impl Into<String>, turn: usize, source: Source) {
        self.slots.insert(entity.into(), Grounding { value: value.into(), turn, source });
    }
}

impl fmt::Display for EntityMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.slots.iter().map(|(k, g)| format!("{k}={}", g.value)).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

struct Candidate<'a> {
    entity: usize,
    value: &'a str,
    start: usize,
    len: usize,
}

/// Finds enum values and synonyms as contiguous token spans. Overlaps are
/// resolved longest first, then leftmost. When `expected` names an open
/// entity and no enum match fires, the whole trimmed utterance becomes its mention.
pub fn detect_entities(utterance: &str, defs: &[EntityDef], expected: Option<&str>) -> Vec<Mention> {
    let tokens = tokenize(utterance);
    let mut candidates = Vec::new();
    for (entity, def) in defs.iter().enumerate() {
        for value in def.values() {
            for surface in std::iter::once(&value.value).chain(&value.synonyms) {
                let pattern = token_strings(surface);
                if pattern.is_empty() || pattern.len() > tokens.len() {
                    continue;
                }
                for start in 0..=tokens.len() - pattern.len() {
                    if tokens[start..start + pattern.len()].iter().zip(&pattern).all(|(t, p)| &t.text == p) {
                        candidates.push(Candidate { entity, value: &value.value, start, len: pattern.len() });
                    }
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.len.cmp(&a.len).then(a.start.cmp(&b.start)).then(a.entity.cmp(&b.entity)));
    let mut taken = vec![false; tokens.len()];
    let mut accepted: Vec<&Candidate> = Vec::new();
    for c in &candidates {
        let span = c.start..c.start + c.len;
        if span.clone().any(|i| taken[i]) {
            continue;
        }
        span.for_each(|i| taken[i] = true);
        accepted.push(c);
    }
    accepted.sort_by_key(|c| c.start);
    let mut mentions: Vec<Mention> = accepted
        .into_iter()
        .filter_map(|c| {
            let start = tokens[c.start].start;
            let end = tokens[c.start + c.len - 1].end;
            Mention::span(utterance, &defs[c.entity].name, start, end, c.value)
        })
        .collect();
    if mentions.is_empty() {
        if let Some(def) = expected.and_then(|name| defs.iter().find(|d| d.name == name)) {
            if def.is_open() {
                mentions.extend(Mention::whole(utterance, &def.name, utterance.trim()));
            }
        }
    }
    mentions
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptionMatch {
    pub value: String,
    pub score: f64,
}

pub const DEFAULT_OPTION_THRESHOLD: f64 = 0.5;

/// Generalizes a free-form reply onto one of `options` by token overlap.
///
/// score = |tokens(utterance) ∩ tokens(value ∪ synonyms)| / |tokens(value)|,
/// and an exact case-insensitive match of the value or a synonym scores 1.0.
/// Ties go to the earlier option; nothing is returned below `threshold`.
pub fn match_option_with(utterance: &str, options: &[EnumValue], threshold: f64) -> Option<OptionMatch> {
    let said: BTreeSet<String> = token_strings(utterance).into_iter().collect();
    let normalized = utterance.trim().to_lowercase();
    let mut best: Option<OptionMatch> = None;
    for option in options {
        let exact =
            std::iter::once(&option.value).chain(&option.synonyms).any(|s| s.trim().to_lowercase() == normalized);
        let score = if exact {
            1.0
        } else {
            let value_tokens: BTreeSet<String> = token_strings(&option.value).into_iter().collect();
            if value_tokens.is_empty() {
                0.0
            } else {
                let surface: BTreeSet<String> =
                    std::iter::once(&option.value).chain(&option.synonyms).flat_map(|s| token_strings(s)).collect();
                said.intersection(&surface).count() as f64 / value_tokens.len() as f64
            }
        };
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(OptionMatch { value: option.value.clone(), score });
        }
    }
    best.filter(|b| b.score >= threshold)
}

pub fn match_option(utterance: &str, options: &[EnumValue]) -> Option<OptionMatch> {
    match_option_with(utterance, options, DEFAULT_OPTION_THRESHOLD)
}

/// Detection plus option generalization: when the pending question asks for
/// an enum entity that detection missed, the closest option by token overlap
/// is taken as the answer.
pub fn understand(utterance: &str, defs: &[EntityDef], expected: Option<&str>) -> Vec<Mention> {
    let mut mentions = detect_entities(utterance, defs, expected);
    let Some(expected) = expected else { return mentions };
    if mentions.iter().any(|m| m.entity == expected) {
        return mentions;
    }
    if let Some(def) = defs.iter().find(|d| d.name == expected && !d.is_open()) {
        if let Some(found) = match_option(utterance, def.values()) {
            mentions.extend(Mention::whole(utterance, expected, &found.value));
        }
    }
    mentions
}

/// Writes mentions into a copy of `memory`; later mentions of the same entity win.
pub fn ground(
    mentions: &[Mention],
    memory: &EntityMemory,
    turn: usize,
    defs: &[EntityDef],
) -> Result<EntityMemory, EntityError> {
    ground_as(mentions, memory, turn, defs, Source::Detected)
}

pub fn ground_as(
    mentions: &[Mention],
    memory: &EntityMemory,
    turn: usize,
    defs: &[EntityDef],
    source: Source,
) -> Result<EntityMemory, EntityError> {
    let mut next = memory.clone();
    for m in mentions {
        let def =
            defs.iter().find(|d| d.name == m.entity).ok_or_else(|| EntityError::UnknownEntity(m.entity.clone()))?;
        let value = match &def.kind {
            EntityKind::Open => m.value.clone(),
            EntityKind::Enum(_) => def
                .canonical_value(&m.value)
                .ok_or_else(|| EntityError::UnknownValue { entity: m.entity.clone(), value: m.value.clone() })?
                .to_string(),
        };
        next.set(m.entity.clone(), value, turn, source);
    }
    Ok(next)
}

/// Renders a template against entity memory.
pub fn substitute(template: &ActionTemplate, memory: &EntityMemory) -> Result<String, EntityError> {
    match &template.action {
        TemplateAction::Text { text } => {
            let mut out = String::with_capacity(text.len());
            for segment in parse_template(text)? {
                match segment {
                    Segment::Literal(s) => out.push_str(&s),
                    Segment::Placeholder(name) => {
                        out.push_str(memory.get(&name).ok_or(EntityError::MissingEntity(name))?)
                    }
                }
            }
            Ok(out)
        }
        TemplateAction::Api { api_name, args } => {
            let values = args
                .iter()
                .map(|a| memory.get(a).map(str::to_string).ok_or_else(|| EntityError::MissingEntity(a.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(format!("{api_name}({})", values.join(", ")))
        }
        TemplateAction::End => Ok(String::new()),
    }
}
