//! LSTM cell, output layer and backpropagation through time over one dialog.
//!
//! Parameters live in one flat vector so the optimizer, clipping and the
//! gradient check can treat them uniformly. Input weights are stored one
//! `4H` row per input feature, which keeps the mostly one-hot input sparse.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Gate order inside every `4H` block.
const I: usize = 0;
const F: usize = 1;
const O: usize = 2;
const G: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub vocab: usize,
    pub embedding: usize,
    pub entities: usize,
    pub templates: usize,
    pub hidden: usize,
}

impl Shape {
    /// d + V + E + T + 1
    pub fn input(&self) -> usize {
        self.embedding + self.vocab + self.entities + self.templates + 1
    }

    pub fn embedding_range(&self) -> Range<usize> {
        0..self.vocab * self.embedding
    }

    pub fn input_weights(&self) -> Range<usize> {
        let start = self.embedding_range().end;
        start..start + self.input() * 4 * self.hidden
    }

    pub fn recurrent_weights(&self) -> Range<usize> {
        let start = self.input_weights().end;
        start..start + self.hidden * 4 * self.hidden
    }

    pub fn gate_bias(&self) -> Range<usize> {
        let start = self.recurrent_weights().end;
        start..start + 4 * self.hidden
    }

    pub fn output_weights(&self) -> Range<usize> {
        let start = self.gate_bias().end;
        start..start + self.hidden * self.templates
    }

    pub fn output_bias(&self) -> Range<usize> {
        let start = self.output_weights().end;
        start..start + self.templates
    }

    pub fn len(&self) -> usize {
        self.output_bias().end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One timestep's input: token ids for the mean embedding plus the indices of
/// the binary features that are set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Encoded {
    pub tokens: Vec<usize>,
    pub bow: Vec<usize>,
    pub entities: Vec<usize>,
    pub last_action: usize,
}

impl Encoded {
    /// Input columns (after the embedding block) whose value is 1.
    fn active(&self, shape: &Shape) -> Vec<usize> {
        let d = shape.embedding;
        let mut active: Vec<usize> = self.bow.iter().map(|&v| d + v).collect();
        active.extend(self.entities.iter().map(|&e| d + shape.vocab + e));
        active.push(d + shape.vocab + shape.entities + self.last_action);
        active
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub shape: Shape,
    pub data: Vec<S>,
}

impl<S: Scalar> Params<S> {
    pub fn zeros(shape: Shape) -> Self {
        Params { shape, data: vec![S::zero(); shape.len()] }
    }

    pub fn uniform(shape: Shape, scale: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len()).map(|_| S::of(rng.gen_range(-scale..=scale))).collect();
        Params { shape, data }
    }

    fn embedding_row(&self, token: usize) -> &[S] {
        let d = self.shape.embedding;
        &self.data[token * d..(token + 1) * d]
    }

    fn input_row(&self, column: usize) -> &[S] {
        let w = 4 * self.shape.hidden;
        let start = self.shape.input_weights().start + column * w;
        &self.data[start..start + w]
    }

    fn recurrent_row(&self, k: usize) -> &[S] {
        let w = 4 * self.shape.hidden;
        let start = self.shape.recurrent_weights().start + k * w;
        &self.data[start..start + w]
    }

    fn output_row(&self, k: usize) -> &[S] {
        let t = self.shape.templates;
        let start = self.shape.output_weights().start + k * t;
        &self.data[start..start + t]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache<S> {
    embedding: Vec<S>,
    active: Vec<usize>,
    gates: Vec<S>,
    c_prev: Vec<S>,
    h_prev: Vec<S>,
    pub c: Vec<S>,
    tanh_c: Vec<S>,
    pub h: Vec<S>,
}

/// Mean of the token embeddings; zero for an empty utterance.
pub fn mean_embedding<S: Scalar>(p: &Params<S>, tokens: &[usize]) -> Vec<S> {
    let mut out = vec![S::zero(); p.shape.embedding];
    if tokens.is_empty() {
        return out;
    }
    let n = S::from_usize(tokens.len()).unwrap();
    for &t in tokens {
        axpy(S::one() / n, p.embedding_row(t), &mut out);
    }
    out
}

pub fn cell_forward<S: Scalar>(p: &Params<S>, x: &Encoded, h_prev: &[S], c_prev: &[S]) -> StepCache<S> {
    let h = p.shape.hidden;
    let mut z = p.data[p.shape.gate_bias()].to_vec();
    let embedding = mean_embedding(p, &x.tokens);
    for (j, &v) in embedding.iter().enumerate() {
        if v != S::zero() {
            axpy(v, p.input_row(j), &mut z);
        }
    }
    let active = x.active(&p.shape);
    for &j in &active {
        axpy(S::one(), p.input_row(j), &mut z);
    }
    for (k, &v) in h_prev.iter().enumerate() {
        if v != S::zero() {
            axpy(v, p.recurrent_row(k), &mut z);
        }
    }
    let mut gates = z;
    for k in 0..h {
        gates[I * h + k] = sigmoid(gates[I * h + k]);
        gates[F * h + k] = sigmoid(gates[F * h + k]);
        gates[O * h + k] = sigmoid(gates[O * h + k]);
        gates[G * h + k] = gates[G * h + k].tanh();
    }
    let c: Vec<S> = (0..h).map(|k| gates[F * h + k] * c_prev[k] + gates[I * h + k] * gates[G * h + k]).collect();
    let tanh_c: Vec<S> = c.iter().map(|v| v.tanh()).collect();
    let hidden = (0..h).map(|k| gates[O * h + k] * tanh_c[k]).collect();
    StepCache { embedding, active, gates, c_prev: c_prev.to_vec(), h_prev: h_prev.to_vec(), c, tanh_c, h: hidden }
}

pub fn output_logits<S: Scalar>(p: &Params<S>, h: &[S]) -> Vec<S> {
    let mut logits = p.data[p.shape.output_bias()].to_vec();
    for (k, &v) in h.iter().enumerate() {
        axpy(v, p.output_row(k), &mut logits);
    }
    logits
}

/// One supervised step of a training dialog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub input: Encoded,
    pub allowed: Vec<usize>,
    pub label: usize,
}

/// Softmax over the allowed entries only; everything else is exactly zero.
pub fn restricted_softmax<S: Scalar>(logits: &[S], allowed: &[usize]) -> Vec<S> {
    let mut out = vec![S::zero(); logits.len()];
    let max = allowed.iter().map(|&a| logits[a]).fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for &a in allowed {
        out[a] = (logits[a] - max).exp();
        total += out[a];
    }
    for &a in allowed {
        out[a] /= total;
    }
    out
}

/// Forward pass over a dialog. Returns the summed cross-entropy and, per
/// step, the restricted distribution.
pub fn dialog_forward<S: Scalar>(p: &Params<S>, steps: &[Step]) -> (S, Vec<Vec<S>>) {
    let h = p.shape.hidden;
    let (mut h_prev, mut c_prev) = (vec![S::zero(); h], vec![S::zero(); h]);
    let mut loss = S::zero();
    let mut dists = Vec::with_capacity(steps.len());
    for step in steps {
        let cache = cell_forward(p, &step.input, &h_prev, &c_prev);
        let q = restricted_softmax(&output_logits(p, &cache.h), &step.allowed);
        loss -= q[step.label].ln();
        dists.push(q);
        h_prev = cache.h;
        c_prev = cache.c;
    }
    (loss, dists)
}

/// Non-truncated BPTT. Adds the gradient of the summed loss to `grad` and
/// returns `(loss, number of steps whose argmax matched the label)`.
pub fn dialog_backward<S: Scalar>(p: &Params<S>, steps: &[Step], grad: &mut [S]) -> (S, usize) {
    let shape = p.shape;
    let h = shape.hidden;
    let t = shape.templates;
    let d = shape.embedding;
    let (mut h_prev, mut c_prev) = (vec![S::zero(); h], vec![S::zero(); h]);
    let mut caches = Vec::with_capacity(steps.len());
    let mut dlogits = Vec::with_capacity(steps.len());
    let mut loss = S::zero();
    let mut correct = 0;
    for step in steps {
        let cache = cell_forward(p, &step.input, &h_prev, &c_prev);
        let mut q = restricted_softmax(&output_logits(p, &cache.h), &step.allowed);
        loss -= q[step.label].ln();
        if super::argmax(&q, &step.allowed) == Some(step.label) {
            correct += 1;
        }
        q[step.label] -= S::one();
        dlogits.push(q);
        h_prev = cache.h.clone();
        c_prev = cache.c.clone();
        caches.push(cache);
    }

    let mut dh_next = vec![S::zero(); h];
    let mut dc_next = vec![S::zero(); h];
    let mut dz = vec![S::zero(); 4 * h];
    for (s, cache) in caches.iter().enumerate().rev() {
        let dl = &dlogits[s];
        let bo = shape.output_bias().start;
        axpy(S::one(), dl, &mut grad[bo..bo + t]);
        let wo = shape.output_weights().start;
        let mut dh = dh_next.clone();
        for k in 0..h {
            axpy(cache.h[k], dl, &mut grad[wo + k * t..wo + (k + 1) * t]);
            dh[k] += dot(p.output_row(k), dl);
        }
        let g = &cache.gates;
        for k in 0..h {
            let (i, f, o, gg) = (g[I * h + k], g[F * h + k], g[O * h + k], g[G * h + k]);
            let tc = cache.tanh_c[k];
            let d_o = dh[k] * tc;
            let dc = dh[k] * o * (S::one() - tc * tc) + dc_next[k];
            dz[I * h + k] = dc * gg * i * (S::one() - i);
            dz[F * h + k] = dc * cache.c_prev[k] * f * (S::one() - f);
            dz[O * h + k] = d_o * o * (S::one() - o);
            dz[G * h + k] = dc * i * (S::one() - gg * gg);
            dc_next[k] = dc * f;
        }
        let b = shape.gate_bias().start;
        axpy(S::one(), &dz, &mut grad[b..b + 4 * h]);
        let wx = shape.input_weights().start;
        for (j, &v) in cache.embedding.iter().enumerate() {
            if v != S::zero() {
                axpy(v, &dz, &mut grad[wx + j * 4 * h..wx + (j + 1) * 4 * h]);
            }
        }
        for &j in &cache.active {
            axpy(S::one(), &dz, &mut grad[wx + j * 4 * h..wx + (j + 1) * 4 * h]);
        }
        let wh = shape.recurrent_weights().start;
        for k in 0..h {
            if cache.h_prev[k] != S::zero() {
                axpy(cache.h_prev[k], &dz, &mut grad[wh + k * 4 * h..wh + (k + 1) * 4 * h]);
            }
            dh_next[k] = dot(p.recurrent_row(k), &dz);
        }
        let tokens = &steps[s].input.tokens;
        if !tokens.is_empty() {
            let n = S::from_usize(tokens.len()).unwrap();
            let demb: Vec<S> = (0..d).map(|j| dot(p.input_row(j), &dz) / n).collect();
            for &tok in tokens {
                axpy(S::one(), &demb, &mut grad[tok * d..(tok + 1) * d]);
            }
        }
    }
    (loss, correct)
}
