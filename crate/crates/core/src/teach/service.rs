use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::{AUTHORED, COMPILED, CORRECTED, LOGS};
use super::{
    apply_correction, now, rank_logs, CorrectedDialog, Correction, CorrectionOutcome, LogDialog, LogEvent, LogFilter,
    LogStatus, LogTurn, LoggedAction, Manifest, MinConfidence, ModelEntry, NewTemplate, RankedLog, Store, TeachError,
};
use crate::compile::{aggregate_to_flow, compile, Augmentation, Catalog, TemplateId, TrainingDialog, WalkLimits};
use crate::entity::understand;
use crate::flow::{validate_flow, DialogFlow, EntityDef, FlowError};
use crate::hcn::{load_model, save_model, train, Emitted, HcnError, Hyperparams, TrainMetrics};
use crate::regress::{
    compare, parse_transcripts, DialogManager, DmFailure, FlowDm, FlowState, Rating, RatingReport, RegressionRun,
    ReplayAction, Transcript,
};
use crate::{Policy, State};

/// Version number that stands for the imported flow run as a rule-based manager.
pub const RULES_VERSION: u64 = 0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub hyper: Hyperparams,
    pub limits: WalkLimits,
    pub augmentation: Augmentation,
}

/// Per-retrain changes to the configured hyperparameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperOverrides {
    pub embedding_dim: Option<usize>,
    pub hidden_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub clip_norm: Option<f64>,
    pub seed: Option<u64>,
    pub init_scale: Option<f64>,
    pub stop_loss: Option<f64>,
}

impl HyperOverrides {
    pub fn apply(&self, base: Hyperparams) -> Hyperparams {
        Hyperparams {
            embedding_dim: self.embedding_dim.unwrap_or(base.embedding_dim),
            hidden_size: self.hidden_size.unwrap_or(base.hidden_size),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            clip_norm: self.clip_norm.unwrap_or(base.clip_norm),
            seed: self.seed.unwrap_or(base.seed),
            init_scale: self.init_scale.unwrap_or(base.init_scale),
            stop_loss: self.stop_loss.unwrap_or(base.stop_loss),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainOutcome {
    pub version: u64,
    pub model_hash: String,
    pub metrics: TrainMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub active_version: Option<u64>,
    pub metrics: Option<TrainMetrics>,
    pub versions: Vec<ModelEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileSummary {
    pub walks: usize,
    pub dialogs: usize,
    pub templates: usize,
    pub masks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatAction {
    pub template_id: TemplateId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSummary {
    pub conversation_id: String,
    pub log_id: u64,
    pub model_version: u64,
    pub turn: usize,
    pub memory: BTreeMap<String, String>,
    pub expected: Option<String>,
    pub ended: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub actions: Vec<ChatAction>,
    pub state_summary: ChatSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunQueue {
    pub run_id: u64,
    pub pairs: usize,
    pub needs_rating: usize,
    pub rated: usize,
    pub pending: Vec<crate::regress::BlindPair>,
}

/// SHA-256 of a model's file content with the version field zeroed, so equal
/// training inputs hash equal whatever version number they were stored under.
pub fn model_hash(model: &Policy) -> String {
    let mut unversioned = model.clone();
    unversioned.version = 0;
    hex::encode(Sha256::digest(save_model(&unversioned)))
}

fn training_hash(dialogs: &[TrainingDialog], catalog: &Catalog, entities: &[EntityDef], hyper: &Hyperparams) -> String {
    let mut h = Sha256::new();
    for part in [
        serde_json::to_vec(dialogs),
        serde_json::to_vec(catalog),
        serde_json::to_vec(entities),
        serde_json::to_vec(hyper),
    ] {
        h.update(part.expect("training inputs serialize"));
        h.update([0]);
    }
    hex::encode(h.finalize())
}

fn logged(emitted: &[Emitted]) -> Vec<LoggedAction> {
    emitted
        .iter()
        .map(|e| LoggedAction {
            template_id: e.template_id,
            text: e.filled_text.clone(),
            probability: e.probability,
            distribution: e.distribution.clone(),
            allowed: e.allowed.clone(),
        })
        .collect()
}

fn chat_actions(emitted: &[Emitted]) -> Vec<ChatAction> {
    emitted.iter().map(|e| ChatAction { template_id: e.template_id, text: e.filled_text.clone() }).collect()
}

struct Conversation {
    model: Arc<Policy>,
    state: State,
    log_id: u64,
}

/// Everything written through the append queue.
struct Inner {
    logs: BTreeMap<u64, LogDialog>,
    corrected: BTreeMap<u64, CorrectedDialog>,
    catalog: Catalog,
    entities: Vec<EntityDef>,
}

/// Releases the retrain token when dropped.
struct RetrainToken<'a>(&'a AtomicBool);

impl Drop for RetrainToken<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

/// A rule-based or learned manager chosen by version number.
enum Manager {
    Rules(FlowDm),
    Model(Arc<Policy>),
}

enum ManagerState {
    Rules(FlowState),
    Model(State),
}

impl DialogManager for Manager {
    type State = ManagerState;

    fn start(&self) -> Result<(Vec<ReplayAction>, ManagerState), DmFailure> {
        match self {
            Manager::Rules(dm) => dm.start().map(|(a, s)| (a, ManagerState::Rules(s))),
            Manager::Model(m) => DialogManager::start(m.as_ref()).map(|(a, s)| (a, ManagerState::Model(s))),
        }
    }

    fn respond(&self, state: &ManagerState, utterance: &str) -> Result<(Vec<ReplayAction>, ManagerState), DmFailure> {
        match (self, state) {
            (Manager::Rules(dm), ManagerState::Rules(s)) => {
                dm.respond(s, utterance).map(|(a, s)| (a, ManagerState::Rules(s)))
            }
            (Manager::Model(m), ManagerState::Model(s)) => {
                DialogManager::respond(m.as_ref(), s, utterance).map(|(a, s)| (a, ManagerState::Model(s)))
            }
            _ => Err(DmFailure("state belongs to another manager".into())),
        }
    }
}

/// The teaching service over one data directory. All methods are blocking and
/// safe to call from many threads.
pub struct TeachService {
    store: Store,
    config: ServiceConfig,
    inner: Mutex<Inner>,
    active: RwLock<Option<Arc<Policy>>>,
    retraining: AtomicBool,
    conversations: Mutex<HashMap<String, Arc<Mutex<Conversation>>>>,
    runs: Mutex<()>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl TeachService {
    pub fn open(root: impl Into<std::path::PathBuf>, config: ServiceConfig) -> Result<TeachService, TeachError> {
        let store = Store::open(root)?;
        let mut logs: BTreeMap<u64, LogDialog> = BTreeMap::new();
        for event in store.read_records::<LogEvent>(LOGS)? {
            match event {
                LogEvent::Started { log, started_at, model_version } => {
                    logs.insert(
                        log,
                        LogDialog {
                            id: log,
                            started_at,
                            model_version,
                            turns: Vec::new(),
                            status: LogStatus::Unreviewed,
                        },
                    );
                }
                LogEvent::Turn { log, turn } => {
                    if let Some(l) = logs.get_mut(&log) {
                        l.turns.push(turn);
                    }
                }
                LogEvent::Status { log, status } => {
                    if let Some(l) = logs.get_mut(&log) {
                        l.status = status;
                    }
                }
            }
        }
        let corrected = store.read_records::<CorrectedDialog>(CORRECTED)?.into_iter().map(|c| (c.log_id, c)).collect();
        let entities = match store.load_entities()? {
            Some(e) => e,
            None => store.load_flow()?.map(|f| f.entities).unwrap_or_default(),
        };
        let catalog = store.load_catalog()?;
        let manifest = store.load_manifest()?;
        let active = match manifest.active {
            Some(v) => Some(Arc::new(load_model(&store.load_model_bytes(v)?)?)),
            None => None,
        };
        Ok(TeachService {
            store,
            config,
            inner: Mutex::new(Inner { logs, corrected, catalog, entities }),
            active: RwLock::new(active),
            retraining: AtomicBool::new(false),
            conversations: Mutex::new(HashMap::new()),
            runs: Mutex::new(()),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn active_model(&self) -> Option<Arc<Policy>> {
        self.active.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Validates and stores a flow; its entities replace the lexicon.
    pub fn import_flow(&self, flow: &DialogFlow) -> Result<(), TeachError> {
        let report = validate_flow(flow);
        if report.has_errors() {
            return Err(FlowError::InvalidFlow(report).into());
        }
        let mut inner = lock(&self.inner);
        self.store.save_flow(flow)?;
        self.store.save_entities(&flow.entities)?;
        inner.entities = flow.entities.clone();
        Ok(())
    }

    pub fn flow(&self) -> Result<DialogFlow, TeachError> {
        self.store.load_flow()?.ok_or(TeachError::NoFlow)
    }

    /// Compiles the stored flow into training dialogs and folds its templates
    /// into the catalog, keeping existing template ids.
    pub fn compile(&self) -> Result<CompileSummary, TeachError> {
        let flow = self.flow()?;
        let compiled = compile(&flow, self.config.limits, self.config.augmentation)?;
        let mut inner = lock(&self.inner);
        let mut catalog = inner.catalog.clone();
        let remap = catalog.merge(&compiled.catalog);
        let dialogs: Vec<TrainingDialog> = compiled
            .dialogs
            .iter()
            .map(|d| {
                let mut d = d.clone();
                for turn in &mut d.turns {
                    for a in &mut turn.system {
                        a.template_id = remap[a.template_id];
                    }
                }
                d
            })
            .collect();
        self.store.write_records(COMPILED, &dialogs)?;
        self.store.save_catalog(&catalog)?;
        inner.catalog = catalog;
        Ok(CompileSummary {
            walks: compiled.walks.len(),
            dialogs: dialogs.len(),
            templates: compiled.catalog.templates.len(),
            masks: compiled.catalog.masks.len(),
        })
    }

    /// Compiled, corrected and authored dialogs, in that order.
    pub fn training_set(&self) -> Result<Vec<TrainingDialog>, TeachError> {
        let inner = lock(&self.inner);
        self.training_set_locked(&inner)
    }

    fn training_set_locked(&self, inner: &Inner) -> Result<Vec<TrainingDialog>, TeachError> {
        let mut dialogs: Vec<TrainingDialog> = self.store.read_records(COMPILED)?;
        dialogs.extend(inner.corrected.values().filter(|c| c.reviewed > 0).map(CorrectedDialog::training_dialog));
        dialogs.extend(self.store.read_records::<TrainingDialog>(AUTHORED)?);
        Ok(dialogs)
    }

    /// Rebuilds a flow from the complete dialogs: compiled and authored ones.
    /// Corrected dialogs are left out because they stop at the corrected turn.
    pub fn export_flow(&self) -> Result<DialogFlow, TeachError> {
        let mut dialogs: Vec<TrainingDialog> = self.store.read_records(COMPILED)?;
        dialogs.extend(self.store.read_records::<TrainingDialog>(AUTHORED)?);
        let (catalog, entities) = {
            let inner = lock(&self.inner);
            (inner.catalog.clone(), inner.entities.clone())
        };
        let mut flow = aggregate_to_flow(&dialogs, &catalog.templates, &entities)?;
        if let Some(original) = self.store.load_flow()? {
            flow.name = original.name;
        }
        Ok(flow)
    }

    /// Trains a new version on the current training set and makes it active.
    /// Only one retrain runs at a time; a failed one leaves the active model alone.
    pub fn retrain(&self, overrides: &HyperOverrides) -> Result<RetrainOutcome, TeachError> {
        if self.retraining.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
            return Err(TeachError::RetrainInProgress);
        }
        let _token = RetrainToken(&self.retraining);
        let (dialogs, catalog, entities) = {
            let inner = lock(&self.inner);
            (self.training_set_locked(&inner)?, inner.catalog.clone(), inner.entities.clone())
        };
        if dialogs.is_empty() {
            return Err(TeachError::TrainingFailed(HcnError::EmptyCorpus));
        }
        let hyper = overrides.apply(self.config.hyper);
        let (mut model, metrics) =
            train::<f64>(&dialogs, &catalog, &entities, &hyper).map_err(TeachError::TrainingFailed)?;
        let mut manifest: Manifest = self.store.load_manifest()?;
        let version = manifest.latest() + 1;
        model.version = version;
        let file = self.store.save_model_bytes(version, &save_model(&model))?;
        let hash = model_hash(&model);
        manifest.versions.push(ModelEntry {
            version,
            file,
            created_at: now(),
            training_hash: training_hash(&dialogs, &catalog, &entities, &hyper),
            model_hash: hash.clone(),
            hyper,
            metrics: metrics.clone(),
        });
        manifest.active = Some(version);
        self.store.save_manifest(&manifest)?;
        *self.active.write().unwrap_or_else(|p| p.into_inner()) = Some(Arc::new(model));
        Ok(RetrainOutcome { version, model_hash: hash, metrics })
    }

    pub fn is_retraining(&self) -> bool {
        self.retraining.load(Ordering::Acquire)
    }

    pub fn model_info(&self) -> Result<ModelInfo, TeachError> {
        let manifest = self.store.load_manifest()?;
        let metrics = manifest.active.and_then(|v| manifest.entry(v)).map(|e| e.metrics.clone());
        Ok(ModelInfo { active_version: manifest.active, metrics, versions: manifest.versions })
    }

    /// A stored model version.
    pub fn model(&self, version: u64) -> Result<Arc<Policy>, TeachError> {
        if let Some(active) = self.active_model().filter(|m| m.version == version) {
            return Ok(active);
        }
        Ok(Arc::new(load_model(&self.store.load_model_bytes(version)?)?))
    }

    pub fn catalog(&self) -> Catalog {
        lock(&self.inner).catalog.clone()
    }

    pub fn entities(&self) -> Vec<EntityDef> {
        lock(&self.inner).entities.clone()
    }

    /// Registers a template with an open mask, or returns the id of an identical one.
    pub fn add_template(&self, template: &NewTemplate) -> Result<TemplateId, TeachError> {
        let mut inner = lock(&self.inner);
        template.check(&inner.entities)?;
        let mut catalog = inner.catalog.clone();
        let id = catalog.add_template(template.action.clone(), template.awaits_user, template.entity.clone());
        if catalog.len() != inner.catalog.len() {
            self.store.save_catalog(&catalog)?;
            inner.catalog = catalog;
        }
        Ok(id)
    }

    // ----- logs -----

    /// Durably records a finished or in-progress dialog and returns its id.
    pub fn record_log(&self, model_version: u64, turns: &[LogTurn]) -> Result<u64, TeachError> {
        for turn in turns {
            turn.check()?;
        }
        let mut inner = lock(&self.inner);
        let id = inner.logs.keys().next_back().map_or(1, |last| last + 1);
        let started_at = now();
        self.store.append(LOGS, &LogEvent::Started { log: id, started_at, model_version })?;
        for turn in turns {
            self.store.append(LOGS, &LogEvent::Turn { log: id, turn: turn.clone() })?;
        }
        inner.logs.insert(
            id,
            LogDialog { id, started_at, model_version, turns: turns.to_vec(), status: LogStatus::Unreviewed },
        );
        Ok(id)
    }

    pub fn append_turn(&self, log: u64, turn: &LogTurn) -> Result<(), TeachError> {
        turn.check()?;
        let mut inner = lock(&self.inner);
        let entry = inner.logs.get_mut(&log).ok_or(TeachError::UnknownLog(log))?;
        self.store.append(LOGS, &LogEvent::Turn { log, turn: turn.clone() })?;
        entry.turns.push(turn.clone());
        Ok(())
    }

    pub fn set_status(&self, log: u64, status: LogStatus) -> Result<(), TeachError> {
        let mut inner = lock(&self.inner);
        let entry = inner.logs.get_mut(&log).ok_or(TeachError::UnknownLog(log))?;
        if entry.status != status {
            self.store.append(LOGS, &LogEvent::Status { log, status })?;
            entry.status = status;
        }
        Ok(())
    }

    pub fn log(&self, id: u64) -> Result<LogDialog, TeachError> {
        lock(&self.inner).logs.get(&id).cloned().ok_or(TeachError::UnknownLog(id))
    }

    /// Logs matching `filter` in id order.
    pub fn logs(&self, filter: LogFilter) -> Vec<LogDialog> {
        lock(&self.inner).logs.values().filter(|l| filter.status.is_none_or(|s| s == l.status)).cloned().collect()
    }

    pub fn ranked_logs(&self, filter: LogFilter) -> Vec<RankedLog> {
        rank_logs(lock(&self.inner).logs.values(), filter, &MinConfidence)
    }

    pub fn corrected(&self, log: u64) -> Option<CorrectedDialog> {
        lock(&self.inner).corrected.get(&log).cloned()
    }

    /// Applies a correction, stores the resulting training dialog and marks the log corrected.
    pub fn correct(&self, correction: &Correction) -> Result<CorrectionOutcome, TeachError> {
        let model = self.active_model();
        let mut inner = lock(&self.inner);
        let log = inner.logs.get(&correction.log_id).cloned().ok_or(TeachError::UnknownLog(correction.log_id))?;
        let mut catalog = inner.catalog.clone();
        let mut entities = inner.entities.clone();
        let outcome = apply_correction(
            &log,
            inner.corrected.get(&log.id),
            correction,
            &mut catalog,
            &mut entities,
            model.as_deref(),
        )?;
        if outcome.catalog_changed {
            self.store.save_catalog(&catalog)?;
            inner.catalog = catalog;
        }
        if outcome.entities_changed {
            self.store.save_entities(&entities)?;
            inner.entities = entities;
        }
        self.store.append(CORRECTED, &outcome.corrected)?;
        inner.corrected.insert(log.id, outcome.corrected.clone());
        if log.status != LogStatus::Corrected {
            self.store.append(LOGS, &LogEvent::Status { log: log.id, status: LogStatus::Corrected })?;
            inner.logs.get_mut(&log.id).expect("log exists").status = LogStatus::Corrected;
        }
        Ok(outcome)
    }

    // ----- chat -----

    /// One user turn in a conversation. An unknown conversation id starts a
    /// new conversation on the active model and returns its opening actions,
    /// followed by the answer to `text` when given.
    pub fn chat(&self, conversation_id: &str, text: Option<&str>) -> Result<ChatReply, TeachError> {
        let (conversation, mut actions, fresh) = {
            let mut map = lock(&self.conversations);
            match map.get(conversation_id) {
                Some(c) => (c.clone(), Vec::new(), false),
                None => {
                    let model = self.active_model().ok_or(TeachError::NoModel)?;
                    let (emitted, state) = model.start()?;
                    let opening = LogTurn { user: None, mentions: Vec::new(), actions: logged(&emitted) };
                    let log_id = self.record_log(model.version, &[opening])?;
                    let c = Arc::new(Mutex::new(Conversation { model, state, log_id }));
                    map.insert(conversation_id.to_string(), c.clone());
                    (c, chat_actions(&emitted), true)
                }
            }
        };
        let mut conv = lock(&conversation);
        if let Some(text) = text.or(if fresh { None } else { Some("") }) {
            let entities = self.entities();
            let mentions = understand(text, &entities, conv.state.expected.as_deref());
            let (emitted, state) = conv.model.respond_grounded(&conv.state, text, &mentions)?;
            let turn = LogTurn { user: Some(text.to_string()), mentions, actions: logged(&emitted) };
            self.append_turn(conv.log_id, &turn)?;
            conv.state = state;
            actions.extend(chat_actions(&emitted));
        }
        Ok(ChatReply {
            actions,
            state_summary: ChatSummary {
                conversation_id: conversation_id.to_string(),
                log_id: conv.log_id,
                model_version: conv.model.version,
                turn: conv.state.turn,
                memory: conv.state.memory.values(),
                expected: conv.state.expected.clone(),
                ended: conv.state.ended,
            },
        })
    }

    // ----- regression -----

    /// Named transcript sets: `logs` (logged conversations), `compiled`
    /// (compiled training dialogs) or `transcripts/<name>.jsonl` in the data directory.
    pub fn transcript_set(&self, name: &str) -> Result<Vec<Transcript>, TeachError> {
        match name {
            "logs" => Ok(self
                .logs(LogFilter { status: None })
                .iter()
                .map(|l| Transcript {
                    id: format!("log/{}", l.id),
                    user_turns: l.turns.iter().filter_map(|t| t.user.clone()).collect(),
                    system_turns: Vec::new(),
                })
                .filter(|t| !t.user_turns.is_empty())
                .collect()),
            "compiled" => Ok(self
                .store
                .read_records::<TrainingDialog>(COMPILED)?
                .iter()
                .map(Transcript::from_dialog)
                .filter(|t| !t.user_turns.is_empty())
                .collect()),
            other => {
                if other.is_empty() || !other.chars().all(|c| c.is_alphanumeric() || c == '-' || c == '_') {
                    return Err(TeachError::Regress(crate::regress::RegressError::TranscriptMismatch(format!(
                        "unknown transcript set `{other}`"
                    ))));
                }
                let rel = format!("transcripts/{other}.jsonl");
                let bytes = self.store.read_bytes(&rel)?.ok_or_else(|| {
                    TeachError::Regress(crate::regress::RegressError::TranscriptMismatch(format!(
                        "unknown transcript set `{other}`"
                    )))
                })?;
                Ok(parse_transcripts(&String::from_utf8_lossy(&bytes))?)
            }
        }
    }

    fn manager(&self, version: u64) -> Result<Manager, TeachError> {
        if version == RULES_VERSION {
            let flow = self.flow()?;
            let catalog = self.catalog();
            return Ok(Manager::Rules(FlowDm::with_catalog(flow, &catalog)?));
        }
        Ok(Manager::Model(self.model(version)?))
    }

    /// Replays `transcripts` on both versions and stores the run.
    pub fn start_run(&self, left: u64, right: u64, transcripts: &[Transcript]) -> Result<RegressionRun, TeachError> {
        let (l, r) = (self.manager(left)?, self.manager(right)?);
        let pairs = compare(transcripts, &l, &r)?;
        let _guard = lock(&self.runs);
        let id = self.store.last_run_id()? + 1;
        let run = RegressionRun::new(id, left, right, self.config.hyper.seed.wrapping_add(id), pairs);
        self.store.save_run(id, &run)?;
        Ok(run)
    }

    pub fn run(&self, id: u64) -> Result<RegressionRun, TeachError> {
        self.store.load_run(id)?.ok_or(TeachError::UnknownRun(id))
    }

    pub fn ratings(&self, id: u64) -> Result<Vec<Rating>, TeachError> {
        self.store.read_records(&Store::ratings_file(id))
    }

    pub fn run_queue(&self, id: u64) -> Result<RunQueue, TeachError> {
        let run = self.run(id)?;
        let ratings = self.ratings(id)?;
        Ok(RunQueue {
            run_id: id,
            pairs: run.pairs.len(),
            needs_rating: run.human_pairs(),
            rated: ratings.len(),
            pending: run.queue(&ratings),
        })
    }

    /// Stores verdicts given on the blind view. The whole batch is rejected
    /// if any pair already has a verdict.
    pub fn rate(&self, id: u64, shown: &[Rating]) -> Result<usize, TeachError> {
        let _guard = lock(&self.runs);
        let run = self.run(id)?;
        let stored = self.ratings(id)?;
        let accepted = run.unblind(&stored, shown)?;
        for r in &accepted {
            self.store.append(&Store::ratings_file(id), r)?;
        }
        Ok(accepted.len())
    }

    pub fn report(&self, id: u64) -> Result<RatingReport, TeachError> {
        let run = self.run(id)?;
        Ok(run.report(&self.ratings(id)?)?)
    }
}
