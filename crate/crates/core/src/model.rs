//! The scoring network and its training machinery.
//!
//! A shared panel encoder (two affine layers with rectified-linear
//! activations) embeds each of the 8 context panels and one candidate panel;
//! the 9 embeddings are concatenated in grid order and a relation scorer
//! (two affine layers) emits one scalar per candidate. Gradients are
//! hand-written reverse-mode accumulation; the encoder gradient sums
//! contributions from all panel uses across all candidates.
//!
//! Parameters live in one flat `Vec<f64>` with a fixed tensor layout, which
//! keeps the optimizer, the Fisher/anchor bookkeeping, checkpointing and
//! finite-difference checks uniform.

use std::io::{Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskgen::{panel_feature_indices, Dataset, RpmProblem, TaskKind, PANEL_DIM};

/// Context panels plus one candidate.
pub const SEQ_LEN: usize = 9;
pub const NUM_CHOICES: usize = 8;
/// 8 context panels followed by 8 choice panels.
pub const NUM_PANELS: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint file {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer widths. The default matches the fixed panel encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub enc_hidden: usize,
    pub embed: usize,
    pub rel_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { input: PANEL_DIM, enc_hidden: 64, embed: 64, rel_hidden: 128 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    enc1_w: usize,
    enc1_b: usize,
    enc2_w: usize,
    enc2_b: usize,
    rel1_w: usize,
    rel1_b: usize,
    rel2_w: usize,
    rel2_b: usize,
    total: usize,
}

impl ModelDims {
    fn layout(&self) -> Layout {
        let enc1_w = 0;
        let enc1_b = enc1_w + self.input * self.enc_hidden;
        let enc2_w = enc1_b + self.enc_hidden;
        let enc2_b = enc2_w + self.embed * self.enc_hidden;
        let rel1_w = enc2_b + self.embed;
        let rel1_b = rel1_w + self.rel_hidden * SEQ_LEN * self.embed;
        let rel2_w = rel1_b + self.rel_hidden;
        let rel2_b = rel2_w + self.rel_hidden;
        Layout { enc1_w, enc1_b, enc2_w, enc2_b, rel1_w, rel1_b, rel2_w, rel2_b, total: rel2_b + 1 }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Named tensors with shapes, in flat-layout order. `enc1.w` is stored
    /// input-major so one-hot input columns are contiguous.
    pub fn tensor_table(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let l = self.layout();
        vec![
            ("enc1.w", self.input, self.enc_hidden, l.enc1_w),
            ("enc1.b", self.enc_hidden, 1, l.enc1_b),
            ("enc2.w", self.embed, self.enc_hidden, l.enc2_w),
            ("enc2.b", self.embed, 1, l.enc2_b),
            ("rel1.w", self.rel_hidden, SEQ_LEN * self.embed, l.rel1_w),
            ("rel1.b", self.rel_hidden, 1, l.rel1_b),
            ("rel2.w", 1, self.rel_hidden, l.rel2_w),
            ("rel2.b", 1, 1, l.rel2_b),
        ]
    }
}

/// Network weights as one flat vector plus the layout that interprets it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        ModelParams { dims, theta: vec![0.0; dims.param_count()] }
    }

    /// Symmetric uniform initialization in +-sqrt(6/(fan_in+fan_out)),
    /// zero biases, deterministic in the seed.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = Self::zeros(dims);
        let l = dims.layout();
        let fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize, rng: &mut StdRng, theta: &mut [f64]| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut theta[range] {
                *w = rng.gen_range(-limit..limit);
            }
        };
        fill(l.enc1_w..l.enc1_b, dims.input, dims.enc_hidden, &mut rng, &mut params.theta);
        fill(l.enc2_w..l.enc2_b, dims.enc_hidden, dims.embed, &mut rng, &mut params.theta);
        fill(l.rel1_w..l.rel1_b, SEQ_LEN * dims.embed, dims.rel_hidden, &mut rng, &mut params.theta);
        fill(l.rel2_w..l.rel2_b, dims.rel_hidden, 1, &mut rng, &mut params.theta);
        params
    }

    pub fn all_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }
}

/// A problem pre-encoded to the active feature indices of its 16 panels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedProblem {
    pub kind: TaskKind,
    /// panels[0..8] are the context, panels[8..16] the choices.
    pub panels: Vec<Vec<u16>>,
    pub answer: usize,
}

impl EncodedProblem {
    /// Stored-size estimate used for the auxiliary-memory accounting.
    pub fn payload_bytes(&self) -> u64 {
        let indices: usize = self.panels.iter().map(|p| p.len() * 2).sum();
        (indices + 16) as u64
    }
}

pub fn encode_problem(problem: &RpmProblem) -> EncodedProblem {
    let mut panels = Vec::with_capacity(NUM_PANELS);
    for p in &problem.context {
        panels.push(panel_feature_indices(p, problem.kind));
    }
    for p in &problem.choices {
        panels.push(panel_feature_indices(p, problem.kind));
    }
    EncodedProblem { kind: problem.kind, panels, answer: problem.answer }
}

pub fn encode_dataset(dataset: &Dataset) -> Vec<EncodedProblem> {
    dataset.problems.iter().map(encode_problem).collect()
}

/// Reusable forward/backward buffers.
pub struct Scratch {
    h1: Vec<f64>,    // NUM_PANELS x enc_hidden
    emb: Vec<f64>,   // NUM_PANELS x embed
    u: Vec<f64>,     // rel_hidden (context part of the scorer pre-activation)
    h3: Vec<f64>,    // NUM_CHOICES x rel_hidden
    dpre3: Vec<f64>, // NUM_CHOICES x rel_hidden
    dsum: Vec<f64>,  // rel_hidden
    de: Vec<f64>,    // NUM_PANELS x embed
    dpre2: Vec<f64>, // embed
    dh1: Vec<f64>,   // enc_hidden
}

impl Scratch {
    pub fn new(dims: ModelDims) -> Self {
        Scratch {
            h1: vec![0.0; NUM_PANELS * dims.enc_hidden],
            emb: vec![0.0; NUM_PANELS * dims.embed],
            u: vec![0.0; dims.rel_hidden],
            h3: vec![0.0; NUM_CHOICES * dims.rel_hidden],
            dpre3: vec![0.0; NUM_CHOICES * dims.rel_hidden],
            dsum: vec![0.0; dims.rel_hidden],
            de: vec![0.0; NUM_PANELS * dims.embed],
            dpre2: vec![0.0; dims.embed],
            dh1: vec![0.0; dims.enc_hidden],
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, xi) in dst.iter_mut().zip(x) {
        *d += a * xi;
    }
}

enum PanelInputs<'a> {
    Indexed(&'a [Vec<u16>]),
    Dense(&'a [Vec<f64>]),
}

impl PanelInputs<'_> {
    fn len(&self) -> usize {
        match self {
            PanelInputs::Indexed(p) => p.len(),
            PanelInputs::Dense(p) => p.len(),
        }
    }
}

/// Shared encoder over all 16 panels: h1 = relu(W1 x + b1), e = relu(W2 h1 + b2).
fn encode_panels(params: &ModelParams, inputs: &PanelInputs, s: &mut Scratch) {
    let d = params.dims;
    let l = d.layout();
    let theta = &params.theta;
    let enc1_b = &theta[l.enc1_b..l.enc1_b + d.enc_hidden];
    for p in 0..NUM_PANELS {
        let h1 = &mut s.h1[p * d.enc_hidden..(p + 1) * d.enc_hidden];
        h1.copy_from_slice(enc1_b);
        match inputs {
            PanelInputs::Indexed(panels) => {
                for &idx in &panels[p] {
                    let col = &theta[l.enc1_w + idx as usize * d.enc_hidden..];
                    axpy(h1, 1.0, &col[..d.enc_hidden]);
                }
            }
            PanelInputs::Dense(panels) => {
                for (i, &xi) in panels[p].iter().enumerate() {
                    if xi != 0.0 {
                        let col = &theta[l.enc1_w + i * d.enc_hidden..];
                        axpy(h1, xi, &col[..d.enc_hidden]);
                    }
                }
            }
        }
        for v in h1.iter_mut() {
            *v = v.max(0.0);
        }
        let h1 = &s.h1[p * d.enc_hidden..(p + 1) * d.enc_hidden];
        let emb = &mut s.emb[p * d.embed..(p + 1) * d.embed];
        for (j, e) in emb.iter_mut().enumerate() {
            let row = &theta[l.enc2_w + j * d.enc_hidden..l.enc2_w + (j + 1) * d.enc_hidden];
            *e = (theta[l.enc2_b + j] + dot(row, h1)).max(0.0);
        }
    }
}

/// Scores all 8 candidates from the panel embeddings. The context part of
/// the scorer pre-activation is shared across candidates.
fn score_from_embeddings(params: &ModelParams, s: &mut Scratch) -> [f64; NUM_CHOICES] {
    let d = params.dims;
    let l = d.layout();
    let theta = &params.theta;
    let width = SEQ_LEN * d.embed;

    s.u.copy_from_slice(&theta[l.rel1_b..l.rel1_b + d.rel_hidden]);
    for (r, u) in s.u.iter_mut().enumerate() {
        let row = &theta[l.rel1_w + r * width..l.rel1_w + r * width + 8 * d.embed];
        *u += dot(row, &s.emb[..8 * d.embed]);
    }

    let rel2_w = &theta[l.rel2_w..l.rel2_w + d.rel_hidden];
    let rel2_b = theta[l.rel2_b];
    let mut scores = [0.0; NUM_CHOICES];
    for k in 0..NUM_CHOICES {
        let cand = &s.emb[(8 + k) * d.embed..(9 + k) * d.embed];
        let h3 = &mut s.h3[k * d.rel_hidden..(k + 1) * d.rel_hidden];
        for (r, h) in h3.iter_mut().enumerate() {
            let row = &theta[l.rel1_w + r * width + 8 * d.embed..l.rel1_w + (r + 1) * width];
            *h = (s.u[r] + dot(row, cand)).max(0.0);
        }
        scores[k] = rel2_b + dot(rel2_w, h3);
    }
    scores
}

fn forward(params: &ModelParams, inputs: &PanelInputs, s: &mut Scratch) -> [f64; NUM_CHOICES] {
    assert_eq!(inputs.len(), NUM_PANELS, "a problem has 8 context and 8 choice panels");
    encode_panels(params, inputs, s);
    score_from_embeddings(params, s)
}

/// Reverse-mode accumulation from upstream score gradients into `grads`
/// (added in place, same flat layout as the parameters). Must be called on a
/// `Scratch` freshly populated by `forward` for the same inputs.
fn backward_from_dscores(
    params: &ModelParams,
    inputs: &PanelInputs,
    dscores: &[f64; NUM_CHOICES],
    s: &mut Scratch,
    grads: &mut [f64],
) {
    let d = params.dims;
    let l = d.layout();
    let theta = &params.theta;
    let width = SEQ_LEN * d.embed;

    // Scorer output layer.
    s.dsum.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..NUM_CHOICES {
        let dk = dscores[k];
        let h3 = &s.h3[k * d.rel_hidden..(k + 1) * d.rel_hidden];
        grads[l.rel2_b] += dk;
        axpy(&mut grads[l.rel2_w..l.rel2_w + d.rel_hidden], dk, h3);
        let rel2_w = &theta[l.rel2_w..l.rel2_w + d.rel_hidden];
        let dpre3 = &mut s.dpre3[k * d.rel_hidden..(k + 1) * d.rel_hidden];
        for (r, dp) in dpre3.iter_mut().enumerate() {
            *dp = if h3[r] > 0.0 { dk * rel2_w[r] } else { 0.0 };
            s.dsum[r] += *dp;
        }
    }

    // Scorer hidden layer: weight gradients and embedding gradients.
    s.de.iter_mut().for_each(|v| *v = 0.0);
    axpy(&mut grads[l.rel1_b..l.rel1_b + d.rel_hidden], 1.0, &s.dsum);
    for r in 0..d.rel_hidden {
        let ds = s.dsum[r];
        if ds != 0.0 {
            // Context blocks see the summed gradient from all candidates.
            axpy(
                &mut grads[l.rel1_w + r * width..l.rel1_w + r * width + 8 * d.embed],
                ds,
                &s.emb[..8 * d.embed],
            );
            let row = &theta[l.rel1_w + r * width..l.rel1_w + r * width + 8 * d.embed];
            axpy(&mut s.de[..8 * d.embed], ds, row);
        }
        for k in 0..NUM_CHOICES {
            let dp = s.dpre3[k * d.rel_hidden + r];
            if dp != 0.0 {
                let cand = &s.emb[(8 + k) * d.embed..(9 + k) * d.embed];
                axpy(
                    &mut grads[l.rel1_w + r * width + 8 * d.embed..l.rel1_w + (r + 1) * width],
                    dp,
                    cand,
                );
                let row = &theta[l.rel1_w + r * width + 8 * d.embed..l.rel1_w + (r + 1) * width];
                axpy(&mut s.de[(8 + k) * d.embed..(9 + k) * d.embed], dp, row);
            }
        }
    }

    // Encoder, panel by panel.
    for p in 0..NUM_PANELS {
        let emb = &s.emb[p * d.embed..(p + 1) * d.embed];
        let de = &s.de[p * d.embed..(p + 1) * d.embed];
        let h1 = &s.h1[p * d.enc_hidden..(p + 1) * d.enc_hidden];
        s.dh1.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..d.embed {
            let dp = if emb[j] > 0.0 { de[j] } else { 0.0 };
            s.dpre2[j] = dp;
            if dp != 0.0 {
                grads[l.enc2_b + j] += dp;
                axpy(
                    &mut grads[l.enc2_w + j * d.enc_hidden..l.enc2_w + (j + 1) * d.enc_hidden],
                    dp,
                    h1,
                );
                let row = &theta[l.enc2_w + j * d.enc_hidden..l.enc2_w + (j + 1) * d.enc_hidden];
                axpy(&mut s.dh1, dp, row);
            }
        }
        for h in 0..d.enc_hidden {
            if h1[h] <= 0.0 {
                s.dh1[h] = 0.0;
            }
        }
        axpy(&mut grads[l.enc1_b..l.enc1_b + d.enc_hidden], 1.0, &s.dh1);
        match inputs {
            PanelInputs::Indexed(panels) => {
                for &idx in &panels[p] {
                    let col = &mut grads
                        [l.enc1_w + idx as usize * d.enc_hidden..l.enc1_w + (idx as usize + 1) * d.enc_hidden];
                    axpy(col, 1.0, &s.dh1);
                }
            }
            PanelInputs::Dense(panels) => {
                for (i, &xi) in panels[p].iter().enumerate() {
                    if xi != 0.0 {
                        let col = &mut grads
                            [l.enc1_w + i * d.enc_hidden..l.enc1_w + (i + 1) * d.enc_hidden];
                        axpy(col, xi, &s.dh1);
                    }
                }
            }
        }
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(scores: &[f64; NUM_CHOICES]) -> [f64; NUM_CHOICES] {
    let lse = log_sum_exp(scores);
    let mut p = [0.0; NUM_CHOICES];
    for (pi, si) in p.iter_mut().zip(scores) {
        *pi = (si - lse).exp();
    }
    p
}

/// Cross-entropy at the true label plus its gradient w.r.t. the scores.
pub fn cross_entropy_from_scores(
    scores: &[f64; NUM_CHOICES],
    label: usize,
) -> (f64, [f64; NUM_CHOICES]) {
    let lse = log_sum_exp(scores);
    let loss = lse - scores[label];
    let mut dscores = [0.0; NUM_CHOICES];
    for (k, ds) in dscores.iter_mut().enumerate() {
        *ds = (scores[k] - lse).exp();
    }
    dscores[label] -= 1.0;
    (loss, dscores)
}

/// Scores one encoded problem; returns the 8-vector of candidate scores.
pub fn score_encoded(params: &ModelParams, enc: &EncodedProblem, s: &mut Scratch) -> [f64; NUM_CHOICES] {
    forward(params, &PanelInputs::Indexed(&enc.panels), s)
}

pub fn score_problem(params: &ModelParams, problem: &RpmProblem) -> [f64; NUM_CHOICES] {
    let mut s = Scratch::new(params.dims);
    score_encoded(params, &encode_problem(problem), &mut s)
}

/// Scores from dense panel vectors of arbitrary input dimension (16 panels,
/// 8 context then 8 choices). General path used for verification.
pub fn score_vectors(params: &ModelParams, panels: &[Vec<f64>]) -> [f64; NUM_CHOICES] {
    let mut s = Scratch::new(params.dims);
    forward(params, &PanelInputs::Dense(panels), &mut s)
}

/// Cross-entropy loss and gradient accumulation for one encoded sample.
/// Gradients are added into `grads`; the caller owns zeroing and scaling.
pub fn accumulate_loss_and_grads(
    params: &ModelParams,
    enc: &EncodedProblem,
    label: usize,
    s: &mut Scratch,
    grads: &mut [f64],
) -> f64 {
    let inputs = PanelInputs::Indexed(&enc.panels);
    let scores = forward(params, &inputs, s);
    let (loss, dscores) = cross_entropy_from_scores(&scores, label);
    backward_from_dscores(params, &inputs, &dscores, s, grads);
    loss
}

/// Cross-entropy plus the soft-target penalty against a teacher's scores,
/// in one backward pass. Returns (classification loss, penalty loss).
pub fn accumulate_ce_and_distill(
    params: &ModelParams,
    enc: &EncodedProblem,
    label: usize,
    teacher_scores: &[f64; NUM_CHOICES],
    lambda: f64,
    s: &mut Scratch,
    grads: &mut [f64],
) -> (f64, f64) {
    let inputs = PanelInputs::Indexed(&enc.panels);
    let scores = forward(params, &inputs, s);
    let (ce, mut dscores) = cross_entropy_from_scores(&scores, label);
    let (penalty, dpenalty) = distill_loss(&scores, teacher_scores, lambda);
    for (d, e) in dscores.iter_mut().zip(&dpenalty) {
        *d += e;
    }
    backward_from_dscores(params, &inputs, &dscores, s, grads);
    (ce, penalty)
}

/// Loss and full gradient for a single problem.
pub fn loss_and_grads(params: &ModelParams, problem: &RpmProblem, label: usize) -> (f64, Vec<f64>) {
    let mut s = Scratch::new(params.dims);
    let mut grads = vec![0.0; params.dims.param_count()];
    let loss = accumulate_loss_and_grads(params, &encode_problem(problem), label, &mut s, &mut grads);
    (loss, grads)
}

/// Dense-input variant of [`loss_and_grads`] for arbitrary dimensions.
pub fn loss_and_grads_vectors(
    params: &ModelParams,
    panels: &[Vec<f64>],
    label: usize,
) -> (f64, Vec<f64>) {
    let mut s = Scratch::new(params.dims);
    let mut grads = vec![0.0; params.dims.param_count()];
    let inputs = PanelInputs::Dense(panels);
    let scores = forward(params, &inputs, &mut s);
    let (loss, dscores) = cross_entropy_from_scores(&scores, label);
    backward_from_dscores(params, &inputs, &dscores, &mut s, &mut grads);
    (loss, grads)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment accumulators shaped like the flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected adaptive-moment update over flat parameters.
pub fn adam_step(theta: &mut [f64], grads: &[f64], state: &mut AdamState, h: &AdamHyper) {
    assert_eq!(theta.len(), grads.len());
    assert_eq!(theta.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
    }
}

/// Argmax with lowest-index tie-breaking.
pub fn argmax(scores: &[f64; NUM_CHOICES]) -> usize {
    let mut best = 0;
    for k in 1..NUM_CHOICES {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    best
}

pub fn predict_encoded(params: &ModelParams, enc: &EncodedProblem, s: &mut Scratch) -> usize {
    argmax(&score_encoded(params, enc, s))
}

pub fn predict(params: &ModelParams, problem: &RpmProblem) -> usize {
    argmax(&score_problem(params, problem))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub flags: Vec<bool>,
}

/// Accuracy plus per-problem correctness flags (kept for the subset-based
/// significance tests).
pub fn evaluate_encoded(
    params: &ModelParams,
    problems: &[EncodedProblem],
    s: &mut Scratch,
) -> Result<EvalResult, ModelError> {
    if problems.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut flags = Vec::with_capacity(problems.len());
    for enc in problems {
        flags.push(predict_encoded(params, enc, s) == enc.answer);
    }
    let accuracy = flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64;
    Ok(EvalResult { accuracy, flags })
}

pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<EvalResult, ModelError> {
    let mut s = Scratch::new(params.dims);
    let encoded = encode_dataset(dataset);
    evaluate_encoded(params, &encoded, &mut s)
}

/// Empirical diagonal Fisher: mean over the dataset of squared gradients of
/// the cross-entropy at the true label.
pub fn fisher_diagonal(
    params: &ModelParams,
    problems: &[EncodedProblem],
) -> Result<Vec<f64>, ModelError> {
    if problems.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut s = Scratch::new(params.dims);
    let mut fisher = vec![0.0; params.dims.param_count()];
    let mut grads = vec![0.0; params.dims.param_count()];
    for enc in problems {
        grads.iter_mut().for_each(|g| *g = 0.0);
        accumulate_loss_and_grads(params, enc, enc.answer, &mut s, &mut grads);
        for (f, g) in fisher.iter_mut().zip(&grads) {
            *f += g * g;
        }
    }
    let n = problems.len() as f64;
    fisher.iter_mut().for_each(|f| *f /= n);
    Ok(fisher)
}

/// Quadratic anchoring state: anchor parameters, accumulated diagonal Fisher
/// and the penalty weight.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcState {
    pub anchor: Vec<f64>,
    pub fisher: Vec<f64>,
    pub lambda: f64,
}

impl EwcState {
    pub fn new(params: &ModelParams, fisher: Vec<f64>, lambda: f64) -> Self {
        EwcState { anchor: params.theta.clone(), fisher, lambda }
    }

    /// After finishing a task: add its Fisher into the running sum and move
    /// the anchor to the post-task parameters.
    pub fn absorb_task(&mut self, params: &ModelParams, task_fisher: &[f64]) {
        for (f, t) in self.fisher.iter_mut().zip(task_fisher) {
            *f += t;
        }
        self.anchor.copy_from_slice(&params.theta);
    }
}

/// Penalty (lambda/2) * sum_i F_i (theta_i - anchor_i)^2 and its gradient.
pub fn ewc_penalty(theta: &[f64], ewc: &EwcState) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grads = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let diff = theta[i] - ewc.anchor[i];
        loss += ewc.fisher[i] * diff * diff;
        grads[i] = ewc.lambda * ewc.fisher[i] * diff;
    }
    (0.5 * ewc.lambda * loss, grads)
}

/// Frozen teacher used by the distillation learner.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    pub params: ModelParams,
    pub lambda: f64,
}

/// Soft-target cross-entropy between the teacher and student score
/// distributions (temperature 1). Returns the loss and its gradient with
/// respect to the student scores.
pub fn distill_loss(
    student_scores: &[f64; NUM_CHOICES],
    teacher_scores: &[f64; NUM_CHOICES],
    lambda: f64,
) -> (f64, [f64; NUM_CHOICES]) {
    if lambda == 0.0 {
        return (0.0, [0.0; NUM_CHOICES]);
    }
    let q = softmax(teacher_scores);
    let p = softmax(student_scores);
    let lse = log_sum_exp(student_scores);
    let mut loss = 0.0;
    let mut grad = [0.0; NUM_CHOICES];
    for k in 0..NUM_CHOICES {
        loss -= q[k] * (student_scores[k] - lse);
        grad[k] = lambda * (p[k] - q[k]);
    }
    (lambda * loss, grad)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RVCLCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes parameters (named tensors with shapes) and, optionally, the
/// optimizer state. The format round-trips bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    adam: Option<&AdamState>,
) -> Result<(), ModelError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [params.dims.input, params.dims.enc_hidden, params.dims.embed, params.dims.rel_hidden] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    let table = params.dims.tensor_table();
    w.write_all(&(table.len() as u32).to_le_bytes())?;
    for (name, rows, cols, offset) in &table {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(*rows as u64).to_le_bytes())?;
        w.write_all(&(*cols as u64).to_le_bytes())?;
        for x in &params.theta[*offset..offset + rows * cols] {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    match adam {
        Some(state) => {
            w.write_all(&[1u8])?;
            w.write_all(&state.step.to_le_bytes())?;
            for vec in [&state.m, &state.v] {
                w.write_all(&(vec.len() as u64).to_le_bytes())?;
                for x in vec.iter() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<AdamState>), ModelError> {
    let bad = |reason: &str| ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != CHECKPOINT_VERSION {
        return Err(bad("unsupported version"));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut dyn Read| -> Result<u64, ModelError> {
        r.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let dims = ModelDims {
        input: read_u64(&mut r)? as usize,
        enc_hidden: read_u64(&mut r)? as usize,
        embed: read_u64(&mut r)? as usize,
        rel_hidden: read_u64(&mut r)? as usize,
    };
    let mut params = ModelParams::zeros(dims);
    r.read_exact(&mut u32buf)?;
    let tensor_count = u32::from_le_bytes(u32buf) as usize;
    let table = dims.tensor_table();
    if tensor_count != table.len() {
        return Err(bad("tensor table mismatch"));
    }
    let mut f64buf = [0u8; 8];
    for (name, rows, cols, offset) in &table {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        if name_buf != name.as_bytes() {
            return Err(bad("tensor name mismatch"));
        }
        r.read_exact(&mut u64buf)?;
        let file_rows = u64::from_le_bytes(u64buf) as usize;
        r.read_exact(&mut u64buf)?;
        let file_cols = u64::from_le_bytes(u64buf) as usize;
        if file_rows != *rows || file_cols != *cols {
            return Err(bad("tensor shape mismatch"));
        }
        for x in &mut params.theta[*offset..offset + rows * cols] {
            r.read_exact(&mut f64buf)?;
            *x = f64::from_le_bytes(f64buf);
        }
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let adam = if flag[0] == 1 {
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let step = u64::from_le_bytes(u64buf);
        let read_vec = |r: &mut dyn Read| -> Result<Vec<f64>, ModelError> {
            let mut lenbuf = [0u8; 8];
            r.read_exact(&mut lenbuf)?;
            let len = u64::from_le_bytes(lenbuf) as usize;
            let mut out = vec![0.0; len];
            let mut xbuf = [0u8; 8];
            for x in &mut out {
                r.read_exact(&mut xbuf)?;
                *x = f64::from_le_bytes(xbuf);
            }
            Ok(out)
        };
        let m = read_vec(&mut r)?;
        let v = read_vec(&mut r)?;
        if m.len() != params.theta.len() || v.len() != params.theta.len() {
            return Err(bad("optimizer state length mismatch"));
        }
        Some(AdamState { m, v, step })
    } else {
        None
    };
    Ok((params, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{encode_panel, generate_problem};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn problem(seed: u64, kind: TaskKind) -> RpmProblem {
        generate_problem(kind, &mut StdRng::seed_from_u64(seed)).unwrap()
    }

    fn dense_panels(p: &RpmProblem) -> Vec<Vec<f64>> {
        p.context
            .iter()
            .chain(p.choices.iter())
            .map(|panel| encode_panel(panel, p.kind))
            .collect()
    }

    /// Straight-line forward pass written independently of the layered
    /// implementation; the reference for the production path.
    fn oracle_forward(params: &ModelParams, panels: &[Vec<f64>]) -> Vec<f64> {
        let d = params.dims;
        let l = d.layout();
        let t = &params.theta;
        let embed_one = |x: &[f64]| -> Vec<f64> {
            let mut h1 = vec![0.0; d.enc_hidden];
            for h in 0..d.enc_hidden {
                let mut acc = t[l.enc1_b + h];
                for i in 0..d.input {
                    acc += t[l.enc1_w + i * d.enc_hidden + h] * x[i];
                }
                h1[h] = acc.max(0.0);
            }
            let mut e = vec![0.0; d.embed];
            for j in 0..d.embed {
                let mut acc = t[l.enc2_b + j];
                for h in 0..d.enc_hidden {
                    acc += t[l.enc2_w + j * d.enc_hidden + h] * h1[h];
                }
                e[j] = acc.max(0.0);
            }
            e
        };
        let embeddings: Vec<Vec<f64>> = panels.iter().map(|p| embed_one(p)).collect();
        let mut scores = Vec::new();
        for k in 0..NUM_CHOICES {
            let mut concat = Vec::new();
            for e in embeddings.iter().take(8) {
                concat.extend_from_slice(e);
            }
            concat.extend_from_slice(&embeddings[8 + k]);
            let mut score = t[l.rel2_b];
            for r in 0..d.rel_hidden {
                let mut acc = t[l.rel1_b + r];
                for (j, c) in concat.iter().enumerate() {
                    acc += t[l.rel1_w + r * SEQ_LEN * d.embed + j] * c;
                }
                score += t[l.rel2_w + r] * acc.max(0.0);
            }
            scores.push(score);
        }
        scores
    }

    #[test]
    fn zero_weights_score_uniformly_and_lose_ln_8() {
        let params = ModelParams::zeros(ModelDims::default());
        let p = problem(1, TaskKind::Center);
        let scores = score_problem(&params, &p);
        assert!(scores.iter().all(|s| *s == scores[0]));
        let (loss, _) = loss_and_grads(&params, &p, p.answer);
        assert!((loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_the_straight_line_oracle() {
        for (seed, kind) in [(3, TaskKind::Center), (4, TaskKind::ThreeByThreeGrid), (5, TaskKind::OutInGrid)] {
            let params = ModelParams::init(ModelDims::default(), seed);
            let p = problem(seed, kind);
            let fast = score_problem(&params, &p);
            let oracle = oracle_forward(&params, &dense_panels(&p));
            for k in 0..NUM_CHOICES {
                assert!(
                    (fast[k] - oracle[k]).abs() < 1e-9,
                    "k={k} fast={} oracle={}",
                    fast[k],
                    oracle[k]
                );
            }
        }
    }

    #[test]
    fn dense_and_indexed_paths_agree() {
        let params = ModelParams::init(ModelDims::default(), 11);
        let p = problem(2, TaskKind::TwoByTwoGrid);
        let dense = score_vectors(&params, &dense_panels(&p));
        let indexed = score_problem(&params, &p);
        for k in 0..NUM_CHOICES {
            assert!((dense[k] - indexed[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_choices_permutes_scores() {
        let params = ModelParams::init(ModelDims::default(), 7);
        let p = problem(9, TaskKind::LeftRight);
        let base = score_problem(&params, &p);
        let mut shuffled = p.clone();
        shuffled.choices.rotate_left(3);
        let rotated = score_problem(&params, &shuffled);
        for k in 0..NUM_CHOICES {
            assert!((rotated[k] - base[(k + 3) % NUM_CHOICES]).abs() < 1e-12);
        }
    }

    fn fd_check(params: &ModelParams, panels: &[Vec<f64>], label: usize, coords: &[usize]) {
        let (_, grads) = loss_and_grads_vectors(params, panels, label);
        let h = 1e-5;
        for &i in coords {
            let mut plus = params.clone();
            plus.theta[i] += h;
            let mut minus = params.clone();
            minus.theta[i] -= h;
            let (lp, _) = loss_and_grads_vectors(&plus, panels, label);
            let (lm, _) = loss_and_grads_vectors(&minus, panels, label);
            let fd = (lp - lm) / (2.0 * h);
            let g = grads[i];
            let scale = g.abs().max(fd.abs());
            if scale >= 1e-5 {
                let rel = (g - fd).abs() / scale;
                assert!(rel <= 1e-4, "coord {i}: grad {g} vs fd {fd} (rel {rel})");
            } else {
                assert!((g - fd).abs() <= 1e-9, "coord {i}: grad {g} vs fd {fd}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_a_small_network() {
        let dims = ModelDims { input: 12, enc_hidden: 6, embed: 5, rel_hidden: 7 };
        let mut rng = StdRng::seed_from_u64(21);
        for trial in 0..3 {
            let params = ModelParams::init(dims, 100 + trial);
            let panels: Vec<Vec<f64>> = (0..NUM_PANELS)
                .map(|_| (0..dims.input).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let label = rng.gen_range(0..NUM_CHOICES);
            let coords: Vec<usize> = (0..dims.param_count()).collect();
            fd_check(&params, &panels, label, &coords);
        }
    }

    #[test]
    fn adam_leaves_params_fixed_under_zero_gradients() {
        let mut theta = vec![1.0, -2.0, 0.5];
        let mut state = AdamState::new(3);
        state.m = vec![0.25; 3];
        state.v = vec![0.25; 3];
        let before = theta.clone();
        adam_step(&mut theta, &[0.0; 3], &mut state, &AdamHyper::default());
        // the bias-corrected first moment decays, but theta moves only by
        // the decayed-moment term; with fresh (zero) moments it is exact.
        let mut theta2 = vec![1.0, -2.0, 0.5];
        let mut fresh = AdamState::new(3);
        adam_step(&mut theta2, &[0.0; 3], &mut fresh, &AdamHyper::default());
        assert_eq!(theta2, before);
        assert!(fresh.m.iter().all(|m| *m == 0.0));
        assert!(state.m.iter().all(|m| (*m - 0.225).abs() < 1e-15));
    }

    #[test]
    fn first_adam_step_has_learning_rate_magnitude() {
        let h = AdamHyper::default();
        for g in [5.0, -0.3, 1e3] {
            let mut theta = vec![0.0];
            let mut state = AdamState::new(1);
            adam_step(&mut theta, &[g], &mut state, &h);
            let expected = -h.learning_rate * g.signum();
            assert!((theta[0] - expected).abs() < 1e-6, "g={g} theta={}", theta[0]);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(x) = (x - 0.5)^2 from x0 = 0.2; the optimum is known exactly.
        let h = AdamHyper::default();
        let mut theta = vec![0.2];
        let mut state = AdamState::new(1);
        for _ in 0..5000 {
            let g = 2.0 * (theta[0] - 0.5);
            adam_step(&mut theta, &[g], &mut state, &h);
        }
        assert!((theta[0] - 0.5).abs() < 1e-3, "ended at {}", theta[0]);
    }

    #[test]
    fn loss_decreases_when_overfitting_a_fixed_batch() {
        let dims = ModelDims { input: PANEL_DIM, enc_hidden: 32, embed: 32, rel_hidden: 64 };
        let params0 = ModelParams::init(dims, 1);
        let mut params = params0.clone();
        let mut rng = StdRng::seed_from_u64(5);
        let batch: Vec<EncodedProblem> = (0..32)
            .map(|_| encode_problem(&generate_problem(TaskKind::Center, &mut rng).unwrap()))
            .collect();
        let mut s = Scratch::new(dims);
        let mut state = AdamState::new(dims.param_count());
        let mut grads = vec![0.0; dims.param_count()];
        let hyper = AdamHyper::default();
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..100 {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for enc in &batch {
                loss += accumulate_loss_and_grads(&params, enc, enc.answer, &mut s, &mut grads);
            }
            loss /= batch.len() as f64;
            grads.iter_mut().for_each(|g| *g /= batch.len() as f64);
            adam_step(&mut params.theta, &grads, &mut state, &hyper);
            if step == 0 {
                first = loss;
            }
            last = loss;
        }
        assert!(last < first, "loss went from {first} to {last}");
    }

    #[test]
    fn predict_breaks_ties_toward_the_lowest_index() {
        assert_eq!(argmax(&[0.0; 8]), 0);
        let mut s = [0.0; 8];
        s[5] = 1.0;
        assert_eq!(argmax(&s), 5);
        let shifted: [f64; 8] = std::array::from_fn(|k| s[k] + 10.0);
        assert_eq!(argmax(&shifted), argmax(&s));
    }

    #[test]
    fn uniform_output_network_evaluates_at_chance() {
        // Zero weights score every candidate identically, so prediction is
        // the tie-break index and accuracy matches the uniform answer rate.
        let params = ModelParams::zeros(ModelDims::default());
        let mut rng = StdRng::seed_from_u64(17);
        let problems: Vec<EncodedProblem> = (0..800)
            .map(|_| encode_problem(&generate_problem(TaskKind::UpDown, &mut rng).unwrap()))
            .collect();
        let mut s = Scratch::new(params.dims);
        let res = evaluate_encoded(&params, &problems, &mut s).unwrap();
        assert!((res.accuracy - 0.125).abs() < 0.04, "accuracy {}", res.accuracy);
        let mean = res.flags.iter().filter(|f| **f).count() as f64 / res.flags.len() as f64;
        assert_eq!(mean, res.accuracy);
    }

    #[test]
    fn evaluate_rejects_empty_input() {
        let params = ModelParams::zeros(ModelDims::default());
        let mut s = Scratch::new(params.dims);
        assert!(matches!(evaluate_encoded(&params, &[], &mut s), Err(ModelError::EmptyDataset)));
    }

    #[test]
    fn fisher_of_one_sample_is_its_squared_gradient() {
        let params = ModelParams::init(ModelDims::default(), 23);
        let p = problem(31, TaskKind::OutInCenter);
        let enc = encode_problem(&p);
        let fisher = fisher_diagonal(&params, std::slice::from_ref(&enc)).unwrap();
        let (_, grads) = loss_and_grads(&params, &p, p.answer);
        for (f, g) in fisher.iter().zip(&grads) {
            assert!((f - g * g).abs() < 1e-15);
            assert!(*f >= 0.0);
        }
    }

    #[test]
    fn ewc_penalty_behaves_like_the_quadratic_form() {
        let params = ModelParams::init(ModelDims { input: 4, enc_hidden: 2, embed: 2, rel_hidden: 2 }, 1);
        let n = params.theta.len();
        let ewc = EwcState::new(&params, vec![1.0; n], 10.0);
        let (loss, grads) = ewc_penalty(&params.theta, &ewc);
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| *g == 0.0));

        // single parameter offset by 0.1 with unit Fisher and lambda 10
        let mut theta = params.theta.clone();
        theta[3] += 0.1;
        let (loss, grads) = ewc_penalty(&theta, &ewc);
        assert!((loss - 0.05).abs() < 1e-12);
        assert!((grads[3] - 1.0).abs() < 1e-12);

        let double = EwcState { lambda: 20.0, ..ewc.clone() };
        let (loss2, grads2) = ewc_penalty(&theta, &double);
        assert!((loss2 - 2.0 * loss).abs() < 1e-12);
        assert!((grads2[3] - 2.0 * grads[3]).abs() < 1e-12);
    }

    #[test]
    fn distillation_is_zero_gradient_at_the_teacher() {
        let scores = [0.3, -0.2, 1.4, 0.0, 0.9, -1.0, 0.1, 0.2];
        let (loss, grad) = distill_loss(&scores, &scores, 1.0);
        let q = softmax(&scores);
        let entropy: f64 = -q.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((loss - entropy).abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));

        let (zero_loss, zero_grad) = distill_loss(&scores, &[0.0; 8], 0.0);
        assert_eq!(zero_loss, 0.0);
        assert!(zero_grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn uniform_teacher_pushes_student_toward_uniform() {
        let mut student = [0.0; 8];
        student[2] = 3.0;
        let (_, grad) = distill_loss(&student, &[0.0; 8], 1.0);
        // descent reduces the over-weighted score and raises the others
        assert!(grad[2] > 0.0);
        for (k, g) in grad.iter().enumerate() {
            if k != 2 {
                assert!(*g < 0.0);
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let dims = ModelDims { input: 20, enc_hidden: 8, embed: 6, rel_hidden: 10 };
        let params = ModelParams::init(dims, 77);
        let mut adam = AdamState::new(dims.param_count());
        adam.step = 41;
        let mut rng = StdRng::seed_from_u64(4);
        for (m, v) in adam.m.iter_mut().zip(adam.v.iter_mut()) {
            *m = rng.gen_range(-1.0..1.0);
            *v = rng.gen_range(0.0..1.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, Some(&adam)).unwrap();
        let (loaded, loaded_adam) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(loaded_adam.unwrap(), adam);

        save_checkpoint(&path, &params, None).unwrap();
        let (loaded, none) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
        assert!(none.is_none());
    }
}
