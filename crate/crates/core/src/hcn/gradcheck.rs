use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::{dialog_backward, dialog_forward, Encoded, Params, Shape, Step};

const H: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradInit {
    Uniform(f64),
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Flat index of the parameter with the largest error.
    pub worst: usize,
    pub parameters: usize,
}

fn random_dialog(shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<Step> {
    let mut last = shape.templates;
    (0..3)
        .map(|_| {
            let tokens: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..shape.vocab)).collect();
            let bow: BTreeSet<usize> = tokens.iter().copied().collect();
            let entities = (0..shape.entities).filter(|_| rng.gen_bool(0.5)).collect();
            let label = rng.gen_range(0..shape.templates);
            let mut allowed: BTreeSet<usize> = (0..shape.templates).filter(|_| rng.gen_bool(0.6)).collect();
            allowed.insert(label);
            let input = Encoded { tokens, bow: bow.into_iter().collect(), entities, last_action: last };
            last = label;
            Step { input, allowed: allowed.into_iter().collect(), label }
        })
        .collect()
}

/// Analytic BPTT gradients of a random 3-step dialog against central
/// differences, as the largest `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(shape: Shape, seed: u64) -> f64 {
    gradient_check_with(shape, seed, GradInit::Uniform(0.5), |_, _| {}).max_relative_error
}

/// [`gradient_check`] with a chosen initialization and a hook that may
/// tamper with the analytic gradient before comparison.
pub fn gradient_check_with(
    shape: Shape,
    seed: u64,
    init: GradInit,
    mut corrupt: impl FnMut(&Shape, &mut [f64]),
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = match init {
        GradInit::Uniform(scale) => Params::<f64>::uniform(shape, scale, &mut rng),
        GradInit::Zero => Params::zeros(shape),
    };
    let steps = random_dialog(&shape, &mut rng);
    let mut analytic = vec![0.0; shape.len()];
    dialog_backward(&params, &steps, &mut analytic);
    corrupt(&shape, &mut analytic);

    let mut result = GradCheck { max_relative_error: 0.0, worst: 0, parameters: shape.len() };
    for (i, &a) in analytic.iter().enumerate() {
        let original = params.data[i];
        params.data[i] = original + H;
        let (plus, _) = dialog_forward(&params, &steps);
        params.data[i] = original - H;
        let (minus, _) = dialog_forward(&params, &steps);
        params.data[i] = original;
        let numeric = (plus - minus) / (2.0 * H);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > result.max_relative_error || rel.is_nan() {
            result.max_relative_error = rel;
            result.worst = i;
        }
    }
    result
}
