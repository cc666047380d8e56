//! Machine teaching: conversation logs, uncertainty ranking, corrections that
//! turn logs into training dialogs, retraining and the model registry.

mod correct;
mod rank;
mod service;
mod store;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compile::{CompileError, TemplateAction, TemplateId};
use crate::entity::{EntityError, Mention};
use crate::flow::FlowError;
use crate::hcn::HcnError;
use crate::regress::RegressError;

pub use correct::{apply_correction, CorrectedDialog, CorrectionOutcome, Relabel};
pub use rank::{rank_logs, LogFilter, MinConfidence, RankedLog, RankingStrategy};
pub use service::{
    model_hash, ChatAction, ChatReply, ChatSummary, CompileSummary, HyperOverrides, ModelInfo, RetrainOutcome,
    RunQueue, ServiceConfig, TeachService, RULES_VERSION,
};
pub use store::{Manifest, ModelEntry, Store};

#[derive(Debug, Error)]
pub enum TeachError {
    #[error("storage failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record in {file}: {message}")]
    Corrupt { file: String, message: String },
    #[error("malformed log event: {0}")]
    MalformedEvent(String),
    #[error("no log {0}")]
    UnknownLog(u64),
    #[error("log {log} has no turn {turn} that can be corrected")]
    InvalidTurn { log: u64, turn: usize },
    #[error("no template {0}")]
    UnknownTemplate(TemplateId),
    #[error("invalid mention: {0}")]
    InvalidMention(String),
    #[error("conflicting correction: {0}")]
    ConflictingCorrection(String),
    #[error("template {template} is masked out at log {log} turn {turn}")]
    MaskViolation { log: u64, turn: usize, template: TemplateId },
    #[error("a retrain is already running")]
    RetrainInProgress,
    #[error("training failed: {0}")]
    TrainingFailed(HcnError),
    #[error("no flow has been imported")]
    NoFlow,
    #[error("no trained model")]
    NoModel,
    #[error("no model version {0}")]
    UnknownVersion(u64),
    #[error("no regression run {0}")]
    UnknownRun(u64),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Model(#[from] HcnError),
    #[error(transparent)]
    Entity(#[from] EntityError),
    #[error(transparent)]
    Regress(#[from] RegressError),
}

impl TeachError {
    /// Stable machine-readable name for API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            TeachError::Io(_) => "IOFailure",
            TeachError::Corrupt { .. } => "CorruptStore",
            TeachError::MalformedEvent(_) => "MalformedEvent",
            TeachError::UnknownLog(_) => "UnknownLog",
            TeachError::InvalidTurn { .. } => "InvalidTurn",
            TeachError::UnknownTemplate(_) => "UnknownTemplate",
            TeachError::InvalidMention(_) => "InvalidMention",
            TeachError::ConflictingCorrection(_) => "ConflictingCorrection",
            TeachError::MaskViolation { .. } => "MaskViolation",
            TeachError::RetrainInProgress => "RetrainInProgress",
            TeachError::TrainingFailed(_) => "TrainingFailed",
            TeachError::NoFlow => "NoFlow",
            TeachError::NoModel => "NoModel",
            TeachError::UnknownVersion(_) => "UnknownVersion",
            TeachError::UnknownRun(_) => "UnknownRun",
            TeachError::Flow(_) => "InvalidFlow",
            TeachError::Compile(_) => "CompileFailed",
            TeachError::Model(_) => "ModelError",
            TeachError::Entity(_) => "EntityError",
            TeachError::Regress(RegressError::TranscriptMismatch(_)) => "TranscriptMismatch",
            TeachError::Regress(RegressError::DuplicateRating(_)) => "DuplicateRating",
            TeachError::Regress(RegressError::UnknownPair(_)) => "UnknownPair",
            TeachError::Regress(_) => "InvalidTranscripts",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogStatus {
    #[default]
    Unreviewed,
    Corrected,
    Dismissed,
}

/// A system action as it was chosen live, with the evidence for ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedAction {
    pub template_id: TemplateId,
    pub text: String,
    /// Masked probability of the chosen template.
    pub probability: f64,
    /// Unmasked distribution over the catalog at the time.
    pub distribution: Vec<f64>,
    /// Templates the masks allowed at that step.
    pub allowed: Vec<TemplateId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogTurn {
    /// `None` for the opening turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(default)]
    pub mentions: Vec<Mention>,
    pub actions: Vec<LoggedAction>,
}

impl LogTurn {
    pub fn check(&self) -> Result<(), TeachError> {
        let bad = |m: String| Err(TeachError::MalformedEvent(m));
        for (i, a) in self.actions.iter().enumerate() {
            if a.distribution.is_empty() {
                return bad(format!("action {i} has no distribution"));
            }
            if !(0.0..=1.0).contains(&a.probability) {
                return bad(format!("action {i} probability {} is outside [0, 1]", a.probability));
            }
            if !a.distribution.iter().all(|p| (0.0..=1.0).contains(p)) {
                return bad(format!("action {i} distribution has entries outside [0, 1]"));
            }
            if a.template_id >= a.distribution.len() || !a.allowed.contains(&a.template_id) {
                return bad(format!("action {i} template {} is not in its distribution or mask", a.template_id));
            }
        }
        if let Some(text) = &self.user {
            if let Some(m) = self.mentions.iter().find(|m| !m.slices(text)) {
                return bad(format!("mention {}..{} does not slice the utterance", m.start, m.end));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogDialog {
    pub id: u64,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub model_version: u64,
    pub turns: Vec<LogTurn>,
    pub status: LogStatus,
}

impl LogDialog {
    pub fn action_count(&self) -> usize {
        self.turns.iter().map(|t| t.actions.len()).sum()
    }
}

/// Append-only log record; a dialog is the fold of its events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Started { log: u64, started_at: u64, model_version: u64 },
    Turn { log: u64, turn: LogTurn },
    Status { log: u64, status: LogStatus },
}

/// A teacher's fix to one turn of a logged dialog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub log_id: u64,
    pub turn_index: usize,
    #[serde(flatten)]
    pub kind: CorrectionKind,
    /// One flag per following turn; the logged turns are kept while the flags are true.
    #[serde(default)]
    pub confirm: Vec<bool>,
    /// Allows replacing an earlier relabel of the same action.
    #[serde(default)]
    pub supersede: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrectionKind {
    EntityFix {
        #[serde(default)]
        add: Vec<Mention>,
        #[serde(default)]
        remove: Vec<Mention>,
    },
    ActionRelabel {
        correct_template_id: TemplateId,
        #[serde(default)]
        action_index: usize,
    },
    NewTemplate {
        template: NewTemplate,
        #[serde(default)]
        action_index: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewTemplate {
    #[serde(flatten)]
    pub action: TemplateAction,
    #[serde(default)]
    pub awaits_user: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
}

impl NewTemplate {
    /// The entity and every placeholder must be known, and the text must parse.
    pub fn check(&self, entities: &[crate::flow::EntityDef]) -> Result<(), TeachError> {
        let known = |name: &str| -> Result<(), TeachError> {
            if entities.iter().any(|d| d.name == name) {
                Ok(())
            } else {
                Err(EntityError::UnknownEntity(name.to_string()).into())
            }
        };
        if let Some(entity) = &self.entity {
            known(entity)?;
        }
        if let TemplateAction::Text { text } = &self.action {
            for segment in crate::entity::parse_template(text).map_err(EntityError::from)? {
                if let crate::entity::Segment::Placeholder(name) = segment {
                    known(&name)?;
                }
            }
        }
        Ok(())
    }
}

/// Seconds since the Unix epoch.
pub fn now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}
