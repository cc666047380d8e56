//! The learned dialog policy: an LSTM over turn features whose softmax output
//! is restricted by action masks.

mod codec;
mod features;
mod gradcheck;
mod model;
pub mod network;
mod train;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::EntityError;
use crate::scalar::Scalar;

pub use codec::{load_model, load_model_as, save_model, FORMAT_VERSION, MAGIC};
pub use features::{build_featurizer, Featurizer, OOV};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheck, GradInit};
pub use model::{featurize_turn, DialogState, Emitted, FeatureVector, PolicyModel, MAX_ACTIONS_PER_TURN};
pub use network::{Encoded, Params, Shape, Step};
pub use train::{encode_dialog, evaluate, train, TrainMetrics};

#[derive(Debug, Error)]
pub enum HcnError {
    #[error("no training dialogs")]
    EmptyCorpus,
    #[error("invalid hyperparameters: {0}")]
    BadHyperparams(String),
    #[error("dialog `{dialog}` uses template {label} but the catalog has {templates}")]
    LabelOutOfRange { dialog: String, label: usize, templates: usize },
    #[error("dialog `{dialog}` step {step}: template {label} is masked out at that point")]
    LabelMasked { dialog: String, step: usize, label: usize },
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("non-finite activation")]
    NonFiniteActivation,
    #[error("every action is masked out")]
    EmptyMask,
    #[error("no question after {0} consecutive actions")]
    ActionLoop(usize),
    #[error(transparent)]
    Entity(#[from] EntityError),
    #[error("not a model file")]
    BadMagic,
    #[error("model file dimensions disagree: {0}")]
    DimMismatch(String),
    #[error("model file ends early")]
    TruncatedFile,
    #[error("model catalog is unreadable: {0}")]
    BadCatalog(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub embedding_dim: usize,
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub init_scale: f64,
    /// Training stops once every action is predicted and the mean loss is at most this.
    pub stop_loss: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            embedding_dim: 32,
            hidden_size: 128,
            learning_rate: 0.01,
            max_epochs: 500,
            clip_norm: 5.0,
            seed: 0,
            init_scale: 0.08,
            stop_loss: 0.1,
        }
    }
}

impl Hyperparams {
    pub fn check(&self) -> Result<(), HcnError> {
        let bad = |m: &str| Err(HcnError::BadHyperparams(m.to_string()));
        if self.embedding_dim == 0 || self.hidden_size == 0 {
            return bad("embedding_dim and hidden_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be a positive number");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 || !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return bad("clip_norm must be positive and init_scale finite and non-negative");
        }
        if self.stop_loss.is_nan() || self.stop_loss < 0.0 {
            return bad("stop_loss must be non-negative");
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Zeroes disallowed entries and renormalizes the rest.
pub fn apply_mask<S: Scalar>(distribution: &[S], allowed: &BTreeSet<usize>) -> Result<Vec<S>, HcnError> {
    let allowed: Vec<usize> = allowed.iter().copied().filter(|&a| a < distribution.len()).collect();
    if allowed.is_empty() {
        return Err(HcnError::EmptyMask);
    }
    let total: S = allowed.iter().map(|&a| distribution[a]).sum();
    let mut out = vec![S::zero(); distribution.len()];
    for &a in &allowed {
        out[a] = if total > S::zero() {
            distribution[a] / total
        } else {
            // every allowed entry underflowed; spread evenly
            S::one() / S::from_usize(allowed.len()).unwrap()
        };
    }
    Ok(out)
}

/// Highest-probability entry among `allowed`, lowest index on ties.
pub fn argmax<S: Scalar>(values: &[S], allowed: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &a in allowed {
        if best.is_none_or(|b| values[a] > values[b] || (values[a] == values[b] && a < b)) {
            best = Some(a);
        }
    }
    best
}
