//! Regression testing: replay the user side of transcripts against two dialog
//! managers, find where their answers part ways and turn human verdicts into
//! a report.

mod report;
mod rules;
mod run;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compile::{TemplateId, TrainingDialog};
use crate::hcn::PolicyModel;
use crate::scalar::Scalar;

pub use report::{aggregate_ratings, round2, Counts, Rating, RatingReport, Side, Verdict};
pub use rules::{FlowDm, FlowState};
pub use run::{BlindPair, RegressionRun, RunPair};

/// Template id recorded for a turn on which the dialog manager failed.
pub const SENTINEL: TemplateId = TemplateId::MAX;

/// Turns shown after the divergence point in a side-by-side view.
pub const CONTEXT_AFTER_DIVERGENCE: usize = 3;

#[derive(Debug, Error)]
pub enum RegressError {
    #[error("transcript mismatch: {0}")]
    TranscriptMismatch(String),
    #[error("transcript `{0}` has no user turns")]
    EmptyTranscript(String),
    #[error("pair {0} already has a verdict")]
    DuplicateRating(usize),
    #[error("no pair {0} in this run")]
    UnknownPair(usize),
    #[error("transcripts line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("rules dialog manager: {0}")]
    Rules(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct DmFailure(pub String);

/// The user side of a past conversation. `system_turns`, when present, keeps
/// the original system texts for reference: one entry for the opening turn
/// plus one per user turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub user_turns: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub system_turns: Vec<Vec<String>>,
}

impl Transcript {
    pub fn from_dialog(dialog: &TrainingDialog) -> Transcript {
        Transcript {
            id: dialog.id.clone(),
            user_turns: dialog.turns.iter().filter_map(|t| t.user.as_ref().map(|u| u.text.clone())).collect(),
            system_turns: dialog
                .turns
                .iter()
                .map(|t| t.system.iter().map(|a| a.filled_text.clone()).collect())
                .collect(),
        }
    }

    pub fn check(&self) -> Result<(), RegressError> {
        if self.user_turns.is_empty() {
            return Err(RegressError::EmptyTranscript(self.id.clone()));
        }
        if !self.system_turns.is_empty() && self.system_turns.len() != self.user_turns.len() + 1 {
            return Err(RegressError::TranscriptMismatch(format!(
                "`{}` has {} user turns but {} system turns (expected {})",
                self.id,
                self.user_turns.len(),
                self.system_turns.len(),
                self.user_turns.len() + 1
            )));
        }
        Ok(())
    }
}

/// One transcript per non-blank line.
pub fn parse_transcripts(jsonl: &str) -> Result<Vec<Transcript>, RegressError> {
    let mut out = Vec::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: Transcript =
            serde_json::from_str(line).map_err(|e| RegressError::Parse { line: i + 1, message: e.to_string() })?;
        t.check()?;
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayAction {
    pub template_id: TemplateId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayTurn {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    pub actions: Vec<ReplayAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReplayTurn {
    fn key(&self) -> Vec<(TemplateId, &str)> {
        self.actions.iter().map(|a| (a.template_id, a.text.as_str())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replay {
    pub transcript_id: String,
    pub turns: Vec<ReplayTurn>,
}

/// Anything that can hold a conversation turn by turn.
pub trait DialogManager {
    type State;
    fn start(&self) -> Result<(Vec<ReplayAction>, Self::State), DmFailure>;
    fn respond(&self, state: &Self::State, utterance: &str) -> Result<(Vec<ReplayAction>, Self::State), DmFailure>;
}

impl<S: Scalar> DialogManager for PolicyModel<S> {
    type State = crate::hcn::DialogState<S>;

    fn start(&self) -> Result<(Vec<ReplayAction>, Self::State), DmFailure> {
        let (emitted, state) = PolicyModel::start(self).map_err(|e| DmFailure(e.to_string()))?;
        Ok((
            emitted.into_iter().map(|e| ReplayAction { template_id: e.template_id, text: e.filled_text }).collect(),
            state,
        ))
    }

    fn respond(&self, state: &Self::State, utterance: &str) -> Result<(Vec<ReplayAction>, Self::State), DmFailure> {
        let (emitted, state) = PolicyModel::respond(self, state, utterance).map_err(|e| DmFailure(e.to_string()))?;
        Ok((
            emitted.into_iter().map(|e| ReplayAction { template_id: e.template_id, text: e.filled_text }).collect(),
            state,
        ))
    }
}

fn failed(user: Option<String>, error: DmFailure) -> ReplayTurn {
    ReplayTurn {
        user,
        actions: vec![ReplayAction { template_id: SENTINEL, text: format!("<failed: {error}>") }],
        error: Some(error.0),
    }
}

/// Feeds every user turn in order, whatever the manager answers. A failing
/// turn is recorded with a [`SENTINEL`] action and the state from before it.
pub fn replay<D: DialogManager>(transcript: &Transcript, dm: &D) -> Replay {
    let mut turns = Vec::with_capacity(transcript.user_turns.len() + 1);
    let mut state = match dm.start() {
        Ok((actions, state)) => {
            turns.push(ReplayTurn { user: None, actions, error: None });
            Some(state)
        }
        Err(e) => {
            turns.push(failed(None, e));
            None
        }
    };
    for utterance in &transcript.user_turns {
        let user = Some(utterance.clone());
        let Some(current) = &state else {
            turns.push(failed(user, DmFailure("conversation never started".into())));
            continue;
        };
        match dm.respond(current, utterance) {
            Ok((actions, next)) => {
                turns.push(ReplayTurn { user, actions, error: None });
                state = Some(next);
            }
            Err(e) => turns.push(failed(user, e)),
        }
    }
    Replay { transcript_id: transcript.id.clone(), turns }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayPair {
    pub transcript_id: String,
    pub left: Replay,
    pub right: Replay,
    /// First turn whose `(template_id, text)` lists differ.
    pub divergence: Option<usize>,
    pub auto_same: bool,
}

impl ReplayPair {
    /// Both sides cut to the divergence point plus the following context turns.
    pub fn view(&self) -> (&[ReplayTurn], &[ReplayTurn]) {
        let end = match self.divergence {
            Some(d) => d + 1 + CONTEXT_AFTER_DIVERGENCE,
            None => usize::MAX,
        };
        let cut = |turns: &'_ [ReplayTurn]| -> usize { end.min(turns.len()) };
        (&self.left.turns[..cut(&self.left.turns)], &self.right.turns[..cut(&self.right.turns)])
    }

    pub fn swapped(&self) -> ReplayPair {
        ReplayPair { left: self.right.clone(), right: self.left.clone(), ..self.clone() }
    }
}

pub fn diff(left: &Replay, right: &Replay) -> Result<ReplayPair, RegressError> {
    if left.transcript_id != right.transcript_id {
        return Err(RegressError::TranscriptMismatch(format!(
            "`{}` replayed against `{}`",
            left.transcript_id, right.transcript_id
        )));
    }
    if left.turns.len() != right.turns.len() {
        return Err(RegressError::TranscriptMismatch(format!(
            "`{}` has {} turns on the left and {} on the right",
            left.transcript_id,
            left.turns.len(),
            right.turns.len()
        )));
    }
    let divergence = left.turns.iter().zip(&right.turns).position(|(l, r)| l.key() != r.key());
    Ok(ReplayPair {
        transcript_id: left.transcript_id.clone(),
        left: left.clone(),
        right: right.clone(),
        divergence,
        auto_same: divergence.is_none(),
    })
}

/// Replays every transcript on both managers and pairs the results.
pub fn compare<L: DialogManager, R: DialogManager>(
    transcripts: &[Transcript],
    left: &L,
    right: &R,
) -> Result<Vec<ReplayPair>, RegressError> {
    transcripts
        .iter()
        .map(|t| {
            t.check()?;
            diff(&replay(t, left), &replay(t, right))
        })
        .collect()
}
