use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{dialog_backward, dialog_forward, Params, Step};
use super::{argmax, build_featurizer, Featurizer, HcnError, Hyperparams, PolicyModel};
use crate::compile::{Catalog, TrainingDialog};
use crate::entity::{ground, EntityMemory};
use crate::flow::EntityDef;
use crate::scalar::Scalar;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    /// Mean cross-entropy per labeled action after the last epoch.
    pub final_loss: f64,
    /// Fraction of labeled actions predicted correctly.
    pub accuracy: f64,
    pub epochs: usize,
    pub steps: usize,
    pub dialogs: usize,
}

/// Turns a dialog into supervised steps, replaying the labeled mentions
/// into entity memory to obtain each step's mask.
pub fn encode_dialog(
    featurizer: &Featurizer,
    catalog: &Catalog,
    entities: &[EntityDef],
    dialog: &TrainingDialog,
) -> Result<Vec<Step>, HcnError> {
    let mut memory = EntityMemory::new();
    let mut last = None;
    let mut steps = Vec::new();
    for (t, turn) in dialog.turns.iter().enumerate() {
        let text = turn.user.as_ref().map_or("", |u| u.text.as_str());
        if let Some(user) = &turn.user {
            memory = ground(&user.mentions, &memory, t, entities)?;
        }
        for (a, action) in turn.system.iter().enumerate() {
            let label = action.template_id;
            if label >= catalog.len() {
                return Err(HcnError::LabelOutOfRange { dialog: dialog.id.clone(), label, templates: catalog.len() });
            }
            let allowed: Vec<usize> = catalog.allowed(&memory).into_iter().collect();
            if !allowed.contains(&label) {
                return Err(HcnError::LabelMasked { dialog: dialog.id.clone(), step: steps.len(), label });
            }
            let input = featurizer.encode(if a == 0 { text } else { "" }, &memory, last);
            steps.push(Step { input, allowed, label });
            last = Some(label);
        }
    }
    Ok(steps)
}

/// Mean loss per step and per-step accuracy.
fn score<S: Scalar>(params: &Params<S>, dialogs: &[Vec<Step>]) -> (f64, f64, usize) {
    let mut loss = 0.0;
    let mut correct = 0;
    let mut total = 0;
    for steps in dialogs {
        let (l, dists) = dialog_forward(params, steps);
        loss += l.as_f64();
        for (step, q) in steps.iter().zip(&dists) {
            total += 1;
            if argmax(q, &step.allowed) == Some(step.label) {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return (0.0, 1.0, 0);
    }
    (loss / total as f64, correct as f64 / total as f64, total)
}

/// Mean loss and accuracy of `model` on `dialogs`, scored the way training scores them.
pub fn evaluate<S: Scalar>(model: &PolicyModel<S>, dialogs: &[TrainingDialog]) -> Result<(f64, f64), HcnError> {
    let encoded = dialogs
        .iter()
        .map(|d| encode_dialog(&model.featurizer, &model.catalog, &model.entities, d))
        .collect::<Result<Vec<_>, _>>()?;
    let (loss, accuracy, _) = score(&model.params, &encoded);
    Ok((loss, accuracy))
}

struct Adam<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: i32,
    lr: f64,
}

impl<S: Scalar> Adam<S> {
    fn new(len: usize, lr: f64) -> Self {
        Adam { m: vec![S::zero(); len], v: vec![S::zero(); len], t: 0, lr }
    }

    fn step(&mut self, params: &mut [S], grad: &[S]) {
        self.t += 1;
        let (b1, b2) = (S::of(BETA1), S::of(BETA2));
        let c1 = S::one() - b1.powi(self.t);
        let c2 = S::one() - b2.powi(self.t);
        let lr = S::of(self.lr);
        let eps = S::of(EPSILON);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (S::one() - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (S::one() - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

fn clip<S: Scalar>(grad: &mut [S], max_norm: f64) {
    let norm = grad.iter().map(|&g| g * g).sum::<S>().sqrt();
    let max_norm = S::of(max_norm);
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
}

/// Trains a policy with one Adam update per dialog per epoch, stopping once
/// every labeled action is predicted with mean loss at most `stop_loss`, or
/// after `max_epochs`.
pub fn train<S: Scalar>(
    dialogs: &[TrainingDialog],
    catalog: &Catalog,
    entities: &[EntityDef],
    hyper: &Hyperparams,
) -> Result<(PolicyModel<S>, TrainMetrics), HcnError> {
    hyper.check()?;
    let featurizer = build_featurizer(dialogs, entities, &catalog.templates, hyper.embedding_dim)?;
    let encoded =
        dialogs.iter().map(|d| encode_dialog(&featurizer, catalog, entities, d)).collect::<Result<Vec<_>, _>>()?;
    let shape = featurizer.shape(hyper.hidden_size);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = Params::<S>::uniform(shape, hyper.init_scale, &mut rng);
    let mut adam = Adam::new(shape.len(), hyper.learning_rate);
    let mut grad = vec![S::zero(); shape.len()];
    let mut order: Vec<usize> = (0..encoded.len()).collect();

    let (mut loss, mut accuracy, steps) = score(&params, &encoded);
    let mut epochs = 0;
    while (accuracy < 1.0 || loss > hyper.stop_loss) && epochs < hyper.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for &i in &order {
            if encoded[i].is_empty() {
                continue;
            }
            grad.iter_mut().for_each(|g| *g = S::zero());
            let (l, _) = dialog_backward(&params, &encoded[i], &mut grad);
            if !l.is_finite() || !grad.iter().all(|g| g.is_finite()) {
                return Err(HcnError::Diverged { epoch: epochs });
            }
            clip(&mut grad, hyper.clip_norm);
            adam.step(&mut params.data, &grad);
        }
        (loss, accuracy, _) = score(&params, &encoded);
        if !loss.is_finite() {
            return Err(HcnError::Diverged { epoch: epochs });
        }
    }

    let model = PolicyModel {
        version: 1,
        hyper: *hyper,
        featurizer,
        entities: entities.to_vec(),
        catalog: catalog.clone(),
        params,
    };
    let metrics = TrainMetrics { final_loss: loss, accuracy, epochs, steps, dialogs: dialogs.len() };
    Ok((model, metrics))
}
