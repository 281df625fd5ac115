//! Training protocols: base initialization, streaming and incremental-batch
//! learners, the offline upper bound, and experiment orchestration.
//!
//! Every learner starts from the shared base-initialization weights for its
//! permutation and is evaluated on all seven test sets after every task; row
//! 1 of the accuracy matrix is the post-base evaluation.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{mix_seed, mix_seed_str, permutation_preset, ExperimentConfig};
use crate::metrics::{
    avg_accuracy, bwt, fwt, omega, MetricsError, MetricsReport, PermutationMetrics, RMatrix,
};
use crate::model::{
    accumulate_ce_and_distill, accumulate_loss_and_grads, adam_step, encode_dataset, ewc_penalty,
    evaluate_encoded, fisher_diagonal, save_checkpoint, score_encoded, AdamHyper, AdamState,
    EncodedProblem, EwcState, ModelDims, ModelError, ModelParams, Scratch, TeacherSnapshot,
    NUM_CHOICES,
};
use crate::replay::{init_buffer_from_base, Balance, BufferRow, PolicyKind, ReplayBuffer};
use crate::taskgen::{generate_dataset, Dataset, TaskGenError, TaskKind};

pub const NUM_TASKS: usize = 7;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("training diverged at update {step} (loss {loss})")]
    Diverged { step: u64, loss: f64 },
    #[error("unknown learner {0:?}")]
    UnknownLearner(String),
    #[error("{failed} of {total} runs failed; partial artifacts carry failure markers")]
    PartialFailure { failed: usize, total: usize },
    #[error("artifact file {path}: {reason}")]
    Artifact { path: String, reason: String },
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The learner protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LearnerKind {
    FineTuneStream,
    PartialReplay { policy: PolicyKind, balance: Balance, replay_size: usize },
    FineTuneBatch,
    Ewc { lambda: f64 },
    Distillation { lambda: f64 },
    CumulativeReplay,
    Offline,
}

impl LearnerKind {
    /// Directory-safe label carrying the variant parameters.
    pub fn label(&self) -> String {
        match self {
            LearnerKind::FineTuneStream => "fine_tune_stream".into(),
            LearnerKind::PartialReplay { policy, balance, replay_size } => {
                format!("partial_replay_{}_{}_r{}", policy.name(), balance.name(), replay_size)
            }
            LearnerKind::FineTuneBatch => "fine_tune_batch".into(),
            LearnerKind::Ewc { .. } => "ewc".into(),
            LearnerKind::Distillation { .. } => "distillation".into(),
            LearnerKind::CumulativeReplay => "cumulative_replay".into(),
            LearnerKind::Offline => "offline".into(),
        }
    }

    pub fn is_streaming(&self) -> bool {
        matches!(self, LearnerKind::FineTuneStream | LearnerKind::PartialReplay { .. })
    }

    /// Resolves a config learner name; partial replay picks up the config's
    /// policy, balance mode and replay size.
    pub fn from_config_name(name: &str, config: &ExperimentConfig) -> Result<Self, RunError> {
        match name {
            "fine_tune_stream" => Ok(LearnerKind::FineTuneStream),
            "partial_replay" => Ok(LearnerKind::PartialReplay {
                policy: config.policy,
                balance: config.balance,
                replay_size: config.replay_size,
            }),
            "fine_tune_batch" => Ok(LearnerKind::FineTuneBatch),
            "ewc" => Ok(LearnerKind::Ewc { lambda: EWC_LAMBDA }),
            "distillation" => Ok(LearnerKind::Distillation { lambda: DISTILL_LAMBDA }),
            "cumulative_replay" => Ok(LearnerKind::CumulativeReplay),
            "offline" => Ok(LearnerKind::Offline),
            other => Err(RunError::UnknownLearner(other.to_string())),
        }
    }
}

/// Regularization weights (grid-searched values; 10 for the quadratic
/// anchoring penalty, 1 for distillation).
pub const EWC_LAMBDA: f64 = 10.0;
pub const DISTILL_LAMBDA: f64 = 1.0;

/// Training hyperparameters shared by all protocols.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub adam: AdamHyper,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_epochs: usize,
    pub offline_max_epochs: usize,
    pub offline_patience: usize,
    pub offline_val_fraction: f64,
    pub divergence_threshold: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            adam: AdamHyper::default(),
            epochs: 50,
            batch_size: 32,
            base_epochs: 50,
            offline_max_epochs: 250,
            offline_patience: 10,
            offline_val_fraction: 0.1,
            divergence_threshold: 1e3,
        }
    }
}

impl TrainHyper {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        TrainHyper {
            adam: AdamHyper { learning_rate: config.learning_rate, ..AdamHyper::default() },
            epochs: config.epochs,
            base_epochs: config.epochs,
            batch_size: config.batch_size,
            offline_max_epochs: (config.epochs * 5).max(config.epochs),
            ..TrainHyper::default()
        }
    }
}

/// All seven task datasets in canonical kind order.
pub struct TaskPool {
    pub datasets: Vec<(Dataset, Dataset)>,
}

impl TaskPool {
    pub fn generate(train_per_task: usize, test_per_task: usize, dataset_seed: u64) -> Result<TaskPool, TaskGenError> {
        let datasets = TaskKind::ALL
            .iter()
            .map(|&kind| generate_dataset(kind, train_per_task, test_per_task, dataset_seed))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TaskPool { datasets })
    }

    pub fn encode(&self) -> EncodedPool {
        EncodedPool {
            train: self.datasets.iter().map(|(tr, _)| Arc::new(encode_dataset(tr))).collect(),
            test: self.datasets.iter().map(|(_, te)| Arc::new(encode_dataset(te))).collect(),
        }
    }
}

/// Pre-encoded task data, shared between runs.
#[derive(Clone)]
pub struct EncodedPool {
    pub train: Vec<Arc<Vec<EncodedProblem>>>,
    pub test: Vec<Arc<Vec<EncodedProblem>>>,
}

/// One permutation's task order with the fixed per-task sample orders.
#[derive(Clone)]
pub struct StreamSchedule {
    pub permutation_id: usize,
    pub kinds: [TaskKind; 7],
    pub train: Vec<Arc<Vec<EncodedProblem>>>,
    pub test: Vec<Arc<Vec<EncodedProblem>>>,
    pub sample_orders: Vec<Vec<usize>>,
    pub stream_seed: u64,
}

/// Fixes task order and sample order before any run.
pub fn build_schedule(pool: &EncodedPool, permutation_id: usize, stream_seed: u64) -> StreamSchedule {
    let kinds = permutation_preset(permutation_id).expect("valid permutation id");
    let train: Vec<_> = kinds.iter().map(|k| Arc::clone(&pool.train[k.index()])).collect();
    let test: Vec<_> = kinds.iter().map(|k| Arc::clone(&pool.test[k.index()])).collect();
    let sample_orders = train
        .iter()
        .enumerate()
        .map(|(t, data)| {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut rng =
                StdRng::seed_from_u64(mix_seed(mix_seed_str(stream_seed, "sample-order"), t as u64));
            order.shuffle(&mut rng);
            order
        })
        .collect();
    StreamSchedule { permutation_id, kinds, train, test, sample_orders, stream_seed }
}

/// Accuracy row over all tasks (permutation order) plus per-problem flags.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub accuracies: Vec<f64>,
    pub flags: Vec<Vec<bool>>,
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub learner: String,
    pub permutation_id: usize,
    pub kinds: [TaskKind; 7],
    pub step_losses: Vec<f64>,
    pub eval_rows: Vec<EvalRow>,
    pub update_steps: u64,
    pub buffer_snapshot: Option<Vec<BufferRow>>,
    pub duration_secs: f64,
    pub aux_memory_bytes: u64,
}

impl RunLog {
    pub fn r_matrix(&self) -> Result<RMatrix, MetricsError> {
        RMatrix::new(self.eval_rows.iter().map(|r| r.accuracies.clone()).collect())
    }

    /// Final-row flags pooled in canonical task-kind order so runs with
    /// different permutations stay index-aligned.
    pub fn final_flags_canonical(&self) -> Vec<bool> {
        let last = self.eval_rows.last().expect("at least one evaluation row");
        let mut out = Vec::new();
        for kind in TaskKind::ALL {
            let pos = self.kinds.iter().position(|k| *k == kind).expect("all kinds scheduled");
            out.extend_from_slice(&last.flags[pos]);
        }
        out
    }

    pub fn final_accuracy(&self) -> f64 {
        let flags = self.final_flags_canonical();
        flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64
    }
}

fn check_loss(loss: f64, step: u64, threshold: f64) -> Result<(), RunError> {
    if !loss.is_finite() || loss > threshold {
        return Err(RunError::Diverged { step, loss });
    }
    Ok(())
}

fn eval_all(params: &ModelParams, schedule: &StreamSchedule, scratch: &mut Scratch) -> Result<EvalRow, RunError> {
    let mut accuracies = Vec::with_capacity(NUM_TASKS);
    let mut flags = Vec::with_capacity(NUM_TASKS);
    for test in &schedule.test {
        let res = evaluate_encoded(params, test, scratch)?;
        accuracies.push(res.accuracy);
        flags.push(res.flags);
    }
    Ok(EvalRow { accuracies, flags })
}

/// Auxiliary loss attached to a batch learner.
enum Aux<'a> {
    None,
    Ewc(&'a EwcState),
    Distill(&'a TeacherSnapshot),
}

struct BatchTrainer {
    params: ModelParams,
    adam: AdamState,
    scratch: Scratch,
    teacher_scratch: Scratch,
    grads: Vec<f64>,
    hyper: TrainHyper,
    step_losses: Vec<f64>,
    update_steps: u64,
}

impl BatchTrainer {
    fn new(params: ModelParams, hyper: TrainHyper) -> Self {
        let dims = params.dims;
        let n = dims.param_count();
        BatchTrainer {
            params,
            adam: AdamState::new(n),
            scratch: Scratch::new(dims),
            teacher_scratch: Scratch::new(dims),
            grads: vec![0.0; n],
            hyper,
            step_losses: Vec::new(),
            update_steps: 0,
        }
    }

    /// One optimizer update over a batch; the loss recorded includes any
    /// auxiliary penalty.
    fn batch_update(&mut self, batch: &[&EncodedProblem], aux: &Aux) -> Result<(), RunError> {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for enc in batch {
            match aux {
                Aux::Distill(teacher) => {
                    let teacher_scores =
                        score_encoded(&teacher.params, enc, &mut self.teacher_scratch);
                    let (ce, penalty) = accumulate_ce_and_distill(
                        &self.params,
                        enc,
                        enc.answer,
                        &teacher_scores,
                        teacher.lambda,
                        &mut self.scratch,
                        &mut self.grads,
                    );
                    loss += ce + penalty;
                }
                _ => {
                    loss += accumulate_loss_and_grads(
                        &self.params,
                        enc,
                        enc.answer,
                        &mut self.scratch,
                        &mut self.grads,
                    );
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        loss *= scale;
        self.grads.iter_mut().for_each(|g| *g *= scale);
        if let Aux::Ewc(state) = aux {
            let (penalty, penalty_grads) = ewc_penalty(&self.params.theta, state);
            loss += penalty;
            for (g, p) in self.grads.iter_mut().zip(&penalty_grads) {
                *g += p;
            }
        }
        adam_step(&mut self.params.theta, &self.grads, &mut self.adam, &self.hyper.adam);
        self.update_steps += 1;
        self.step_losses.push(loss);
        check_loss(loss, self.update_steps, self.hyper.divergence_threshold)
    }

    /// Runs `epochs` shuffled passes over an index list into task data.
    fn train_epochs(
        &mut self,
        data: &[(usize, usize)],
        lookup: &[Arc<Vec<EncodedProblem>>],
        epochs: usize,
        shuffle_seed: u64,
        aux: &Aux,
    ) -> Result<(), RunError> {
        let mut order: Vec<(usize, usize)> = data.to_vec();
        for epoch in 0..epochs {
            let mut rng = StdRng::seed_from_u64(mix_seed(shuffle_seed, epoch as u64));
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.hyper.batch_size) {
                let batch: Vec<&EncodedProblem> =
                    chunk.iter().map(|&(t, i)| &lookup[t][i]).collect();
                self.batch_update(&batch, aux)?;
            }
        }
        Ok(())
    }
}

/// Offline mini-batch training on the first task only. Every continual
/// learner starts from the returned weights.
pub fn base_initialize(
    schedule: &StreamSchedule,
    dims: ModelDims,
    hyper: &TrainHyper,
    init_seed: u64,
) -> Result<ModelParams, RunError> {
    let params = ModelParams::init(dims, init_seed);
    let mut trainer = BatchTrainer::new(params, *hyper);
    let data: Vec<(usize, usize)> = (0..schedule.train[0].len()).map(|i| (0, i)).collect();
    trainer.train_epochs(
        &data,
        &schedule.train,
        hyper.base_epochs,
        mix_seed_str(init_seed, "base-init"),
        &Aux::None,
    )?;
    Ok(trainer.params)
}

/// Streaming protocols: one gradient update per streamed sample.
pub fn stream_train(
    kind: &LearnerKind,
    start: &ModelParams,
    schedule: &StreamSchedule,
    hyper: &TrainHyper,
) -> Result<RunLog, RunError> {
    let started = Instant::now();
    let dims = start.dims;
    let mut params = start.clone();
    let mut adam = AdamState::new(dims.param_count());
    let mut scratch = Scratch::new(dims);
    let mut grads = vec![0.0; dims.param_count()];
    let mut step_losses = Vec::new();
    let mut eval_rows = vec![eval_all(&params, schedule, &mut scratch)?];
    let mut update_steps: u64 = 0;

    let mut buffer: Option<ReplayBuffer> = match kind {
        LearnerKind::FineTuneStream => None,
        LearnerKind::PartialReplay { policy, balance, replay_size } => Some(init_buffer_from_base(
            schedule.train[0].as_ref().clone(),
            0,
            &params,
            *policy,
            *balance,
            *replay_size,
            hyper.base_epochs as u64,
        )),
        other => return Err(RunError::UnknownLearner(format!("{other:?} is not a streaming learner"))),
    };
    let mut select_rng =
        StdRng::seed_from_u64(mix_seed_str(schedule.stream_seed, "replay-select"));

    let mut step: u64 = 0;
    for task_idx in 1..NUM_TASKS {
        for &sample_idx in &schedule.sample_orders[task_idx] {
            step += 1;
            let current = &schedule.train[task_idx][sample_idx];
            let loss = match buffer.as_mut() {
                None => {
                    grads.iter_mut().for_each(|g| *g = 0.0);
                    let loss = accumulate_loss_and_grads(
                        &params,
                        current,
                        current.answer,
                        &mut scratch,
                        &mut grads,
                    );
                    adam_step(&mut params.theta, &grads, &mut adam, &hyper.adam);
                    loss
                }
                Some(buf) => {
                    let chosen = buf.select(&mut select_rng);
                    grads.iter_mut().for_each(|g| *g = 0.0);
                    let mut loss = 0.0;
                    for &idx in &chosen {
                        let entry = &buf.entries[idx];
                        loss += accumulate_loss_and_grads(
                            &params,
                            &entry.sample,
                            entry.label,
                            &mut scratch,
                            &mut grads,
                        );
                    }
                    loss += accumulate_loss_and_grads(
                        &params,
                        current,
                        current.answer,
                        &mut scratch,
                        &mut grads,
                    );
                    let n = (chosen.len() + 1) as f64;
                    loss /= n;
                    grads.iter_mut().for_each(|g| *g /= n);
                    adam_step(&mut params.theta, &grads, &mut adam, &hyper.adam);

                    // Post-update bookkeeping for the replayed batch.
                    let updates: Vec<(usize, [f64; NUM_CHOICES])> = chosen
                        .iter()
                        .map(|&idx| (idx, score_encoded(&params, &buf.entries[idx].sample, &mut scratch)))
                        .collect();
                    buf.update_after_replay(&updates, step);
                    let current_scores = score_encoded(&params, current, &mut scratch);
                    buf.add_entry(current.clone(), task_idx, &current_scores, step);
                    loss
                }
            };
            update_steps += 1;
            step_losses.push(loss);
            check_loss(loss, step, hyper.divergence_threshold)?;
        }
        eval_rows.push(eval_all(&params, schedule, &mut scratch)?);
    }

    let aux_memory_bytes = buffer
        .as_ref()
        .map(|b| b.entries.iter().map(|e| e.sample.payload_bytes() + 48).sum())
        .unwrap_or(0);
    Ok(RunLog {
        learner: kind.label(),
        permutation_id: schedule.permutation_id,
        kinds: schedule.kinds,
        step_losses,
        eval_rows,
        update_steps,
        buffer_snapshot: buffer.map(|b| b.export_rows()),
        duration_secs: started.elapsed().as_secs_f64(),
        aux_memory_bytes,
    })
}

/// Incremental-batch protocols: each task is looped over for a fixed number
/// of epochs.
pub fn batch_train(
    kind: &LearnerKind,
    start: &ModelParams,
    schedule: &StreamSchedule,
    hyper: &TrainHyper,
) -> Result<RunLog, RunError> {
    let started = Instant::now();
    let mut trainer = BatchTrainer::new(start.clone(), *hyper);
    let mut eval_rows = vec![eval_all(&trainer.params, schedule, &mut trainer.scratch)?];

    let mut ewc_state = match kind {
        LearnerKind::Ewc { lambda } => {
            let fisher = fisher_diagonal(&trainer.params, &schedule.train[0])?;
            Some(EwcState::new(&trainer.params, fisher, *lambda))
        }
        _ => None,
    };
    let mut teacher = match kind {
        LearnerKind::Distillation { lambda } => {
            Some(TeacherSnapshot { params: trainer.params.clone(), lambda: *lambda })
        }
        _ => None,
    };
    let cumulative = matches!(kind, LearnerKind::CumulativeReplay);
    if matches!(kind, LearnerKind::FineTuneStream | LearnerKind::PartialReplay { .. } | LearnerKind::Offline) {
        return Err(RunError::UnknownLearner(format!("{kind:?} is not a batch learner")));
    }

    for task_idx in 1..NUM_TASKS {
        let data: Vec<(usize, usize)> = if cumulative {
            (0..=task_idx)
                .flat_map(|t| (0..schedule.train[t].len()).map(move |i| (t, i)))
                .collect()
        } else {
            (0..schedule.train[task_idx].len()).map(|i| (task_idx, i)).collect()
        };
        let aux = match (&ewc_state, &teacher) {
            (Some(state), _) => Aux::Ewc(state),
            (_, Some(snapshot)) => Aux::Distill(snapshot),
            _ => Aux::None,
        };
        let shuffle_seed =
            mix_seed(mix_seed_str(schedule.stream_seed, "batch-epochs"), task_idx as u64);
        trainer.train_epochs(&data, &schedule.train, hyper.epochs, shuffle_seed, &aux)?;

        if let Some(state) = ewc_state.as_mut() {
            let task_fisher = fisher_diagonal(&trainer.params, &schedule.train[task_idx])?;
            state.absorb_task(&trainer.params, &task_fisher);
        }
        if let Some(snapshot) = teacher.as_mut() {
            snapshot.params = trainer.params.clone();
        }
        eval_rows.push(eval_all(&trainer.params, schedule, &mut trainer.scratch)?);
    }

    let param_bytes = (trainer.params.dims.param_count() * 8) as u64;
    let aux_memory_bytes = match kind {
        LearnerKind::Ewc { .. } => 2 * param_bytes,
        LearnerKind::Distillation { .. } => param_bytes,
        LearnerKind::CumulativeReplay => schedule
            .train
            .iter()
            .map(|t| t.iter().map(|e| e.payload_bytes()).sum::<u64>())
            .sum(),
        _ => 0,
    };
    Ok(RunLog {
        learner: kind.label(),
        permutation_id: schedule.permutation_id,
        kinds: schedule.kinds,
        step_losses: trainer.step_losses,
        eval_rows,
        update_steps: trainer.update_steps,
        buffer_snapshot: None,
        duration_secs: started.elapsed().as_secs_f64(),
        aux_memory_bytes,
    })
}

/// Offline upper bound: for every prefix of the task order, trains a fresh
/// model on all data seen so far with validation-based early stopping
/// (at least `epochs`, at most `offline_max_epochs`, stop after
/// `offline_patience` epochs without validation-loss improvement, keep the
/// checkpoint with the best validation accuracy).
pub fn offline_train(
    schedule: &StreamSchedule,
    dims: ModelDims,
    hyper: &TrainHyper,
    offline_seed: u64,
) -> Result<RunLog, RunError> {
    let started = Instant::now();
    let mut eval_rows = Vec::with_capacity(NUM_TASKS);
    let mut step_losses = Vec::new();
    let mut update_steps = 0;
    let mut scratch = Scratch::new(dims);

    for t in 0..NUM_TASKS {
        let mut all: Vec<(usize, usize)> = (0..=t)
            .flat_map(|task| (0..schedule.train[task].len()).map(move |i| (task, i)))
            .collect();
        let mut rng = StdRng::seed_from_u64(mix_seed(mix_seed_str(offline_seed, "val-split"), t as u64));
        all.shuffle(&mut rng);
        let val_len = ((all.len() as f64 * hyper.offline_val_fraction) as usize).max(1);
        let (val_idx, train_idx) = all.split_at(val_len);
        let val: Vec<EncodedProblem> = val_idx
            .iter()
            .map(|&(task, i)| schedule.train[task][i].clone())
            .collect();

        let params = ModelParams::init(dims, mix_seed(offline_seed, t as u64));
        let mut trainer = BatchTrainer::new(params, *hyper);
        let mut best_val_loss = f64::INFINITY;
        let mut best_val_acc = f64::NEG_INFINITY;
        let mut best_params = trainer.params.clone();
        let mut stale_epochs = 0;

        for epoch in 0..hyper.offline_max_epochs {
            let shuffle_seed = mix_seed(
                mix_seed(mix_seed_str(offline_seed, "offline-epochs"), t as u64),
                epoch as u64,
            );
            trainer.train_epochs(train_idx, &schedule.train, 1, shuffle_seed, &Aux::None)?;

            let eval = evaluate_encoded(&trainer.params, &val, &mut trainer.scratch)?;
            let mut val_loss = 0.0;
            for enc in &val {
                let scores = score_encoded(&trainer.params, enc, &mut trainer.scratch);
                let (loss, _) = crate::model::cross_entropy_from_scores(&scores, enc.answer);
                val_loss += loss;
            }
            val_loss /= val.len() as f64;

            if eval.accuracy > best_val_acc {
                best_val_acc = eval.accuracy;
                best_params = trainer.params.clone();
            }
            if val_loss < best_val_loss {
                best_val_loss = val_loss;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
            }
            if epoch + 1 >= hyper.epochs && stale_epochs >= hyper.offline_patience {
                break;
            }
        }
        step_losses.extend_from_slice(&trainer.step_losses);
        update_steps += trainer.update_steps;
        eval_rows.push(eval_all(&best_params, schedule, &mut scratch)?);
    }

    Ok(RunLog {
        learner: LearnerKind::Offline.label(),
        permutation_id: schedule.permutation_id,
        kinds: schedule.kinds,
        step_losses,
        eval_rows,
        update_steps,
        buffer_snapshot: None,
        duration_secs: started.elapsed().as_secs_f64(),
        aux_memory_bytes: 0,
    })
}

/// Dispatches one learner run from shared base weights.
pub fn run_learner(
    kind: &LearnerKind,
    base: &ModelParams,
    schedule: &StreamSchedule,
    hyper: &TrainHyper,
    offline_seed: u64,
) -> Result<RunLog, RunError> {
    match kind {
        LearnerKind::FineTuneStream | LearnerKind::PartialReplay { .. } => {
            stream_train(kind, base, schedule, hyper)
        }
        LearnerKind::Offline => offline_train(schedule, base.dims, hyper, offline_seed),
        _ => batch_train(kind, base, schedule, hyper),
    }
}

// ---------------------------------------------------------------------------
// Artifact persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogRecord {
    Meta { learner: String, permutation: usize, tasks: Vec<TaskKind> },
    Step { step: u64, loss: f64 },
    Eval { after_task: usize, accuracies: Vec<f64> },
    Summary { update_steps: u64, aux_memory_bytes: u64 },
}

/// Writes the accuracy matrix as comma-separated rows under a header naming
/// the learner and permutation.
pub fn write_r_matrix(path: &Path, log: &RunLog) -> Result<(), RunError> {
    let r = log.r_matrix()?;
    let mut out = String::new();
    let task_names: Vec<&str> = log.kinds.iter().map(|k| k.name()).collect();
    out.push_str(&format!(
        "# learner={} permutation={} tasks={}\n",
        log.learner,
        log.permutation_id,
        task_names.join(",")
    ));
    for row in r.rows() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_r_matrix(path: &Path) -> Result<RMatrix, RunError> {
    let bad = |reason: &str| RunError::Artifact {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|c| c.parse::<f64>()).collect();
        rows.push(row.map_err(|_| bad("unparseable accuracy cell"))?);
    }
    Ok(RMatrix::new(rows)?)
}

pub fn write_runlog(path: &Path, log: &RunLog) -> Result<(), RunError> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let records = std::iter::once(LogRecord::Meta {
        learner: log.learner.clone(),
        permutation: log.permutation_id,
        tasks: log.kinds.to_vec(),
    })
    .chain(log.step_losses.iter().enumerate().map(|(i, loss)| LogRecord::Step {
        step: (i + 1) as u64,
        loss: *loss,
    }))
    .chain(log.eval_rows.iter().enumerate().map(|(i, row)| LogRecord::Eval {
        after_task: i + 1,
        accuracies: row.accuracies.clone(),
    }))
    .chain(std::iter::once(LogRecord::Summary {
        update_steps: log.update_steps,
        aux_memory_bytes: log.aux_memory_bytes,
    }));
    for record in records {
        writeln!(w, "{}", serde_json::to_string(&record).expect("log record serializes"))?;
    }
    w.flush()?;
    Ok(())
}

/// Final-row correctness flags in canonical task order, one row per problem.
pub fn write_flags(path: &Path, log: &RunLog) -> Result<(), RunError> {
    let mut out = String::from("kind,index,correct\n");
    let last = log.eval_rows.last().expect("at least one evaluation row");
    for kind in TaskKind::ALL {
        let pos = log.kinds.iter().position(|k| *k == kind).expect("all kinds scheduled");
        for (i, correct) in last.flags[pos].iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", kind.name(), i, u8::from(*correct)));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_flags(path: &Path) -> Result<Vec<bool>, RunError> {
    let bad = |reason: &str| RunError::Artifact {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let text = std::fs::read_to_string(path)?;
    let mut flags = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let cell = line.rsplit(',').next().ok_or_else(|| bad("missing correct column"))?;
        flags.push(cell == "1");
    }
    if flags.is_empty() {
        return Err(bad("no flag rows"));
    }
    Ok(flags)
}

pub fn write_buffer_csv(path: &Path, rows: &[BufferRow]) -> Result<(), RunError> {
    let mut out = String::from("entry,task_id,raw_score,value,prob,replay_count,last_replay_step\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.entry, r.task_id, r.raw_score, r.value, r.prob, r.replay_count, r.last_replay_step
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_buffer_csv(path: &Path) -> Result<Vec<BufferRow>, RunError> {
    let bad = |reason: String| RunError::Artifact { path: path.display().to_string(), reason };
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Err(bad(format!("expected 7 columns, found {}", cells.len())));
        }
        let parse_err = |field: &str| bad(format!("unparseable {field}"));
        rows.push(BufferRow {
            entry: cells[0].parse().map_err(|_| parse_err("entry"))?,
            task_id: cells[1].parse().map_err(|_| parse_err("task_id"))?,
            raw_score: cells[2].parse().map_err(|_| parse_err("raw_score"))?,
            value: cells[3].parse().map_err(|_| parse_err("value"))?,
            prob: cells[4].parse().map_err(|_| parse_err("prob"))?,
            replay_count: cells[5].parse().map_err(|_| parse_err("replay_count"))?,
            last_replay_step: cells[6].parse().map_err(|_| parse_err("last_replay_step"))?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Experiment orchestration
// ---------------------------------------------------------------------------

/// Persisted outcome of one (learner, permutation) run.
pub struct RunArtifacts {
    pub log: RunLog,
    pub r: RMatrix,
}

/// Executes every requested learner over the selected permutations,
/// persists all artifacts, and writes per-learner metric reports averaged
/// over permutations. The offline learner always runs (its matrix is the
/// normalizer). Failed runs leave a failure marker and do not stop the rest.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(), RunError> {
    let out = &config.out_dir;
    std::fs::create_dir_all(out)?;
    let hyper = TrainHyper::from_config(config);
    let dims = ModelDims::default();

    let pool = ensure_datasets(config)?;
    let encoded = pool.encode();

    let mut learners = config
        .learners
        .iter()
        .map(|name| LearnerKind::from_config_name(name, config))
        .collect::<Result<Vec<_>, _>>()?;
    if !learners.iter().any(|l| *l == LearnerKind::Offline) {
        learners.push(LearnerKind::Offline);
    }

    let perm_ids = config.permutations.ids();
    let schedules: Vec<StreamSchedule> = perm_ids
        .iter()
        .map(|&id| build_schedule(&encoded, id, mix_seed(config.seeds.stream, id as u64)))
        .collect();

    // Shared base initialization per permutation.
    let bases: Vec<Result<ModelParams, RunError>> = schedules
        .par_iter()
        .map(|schedule| base_initialize(schedule, dims, &hyper, mix_seed(config.seeds.init, schedule.permutation_id as u64)))
        .collect();
    let mut base_params = Vec::new();
    for (schedule, base) in schedules.iter().zip(bases) {
        let base = base?;
        let perm_dir = out.join(format!("perm{}", schedule.permutation_id));
        std::fs::create_dir_all(&perm_dir)?;
        save_checkpoint(&perm_dir.join("base_init.ckpt"), &base, None)?;
        base_params.push(base);
    }

    // All (permutation, learner) runs are independent.
    let jobs: Vec<(usize, LearnerKind)> = (0..schedules.len())
        .flat_map(|s| learners.iter().cloned().map(move |l| (s, l)))
        .collect();
    let results: Vec<(usize, LearnerKind, Result<RunLog, RunError>)> = jobs
        .into_par_iter()
        .map(|(s, kind)| {
            let log = run_learner(
                &kind,
                &base_params[s],
                &schedules[s],
                &hyper,
                mix_seed(config.seeds.init, 1000 + schedules[s].permutation_id as u64),
            );
            (s, kind, log)
        })
        .collect();

    let mut failed = 0;
    let total = results.len();
    let mut logs: Vec<(usize, LearnerKind, RunLog)> = Vec::new();
    let mut timing = String::from("learner,permutation,duration_secs,update_steps,aux_memory_bytes\n");
    for (s, kind, result) in results {
        let perm_id = schedules[s].permutation_id;
        let run_dir = out.join(format!("perm{perm_id}")).join(kind.label());
        std::fs::create_dir_all(&run_dir)?;
        match result {
            Ok(log) => {
                write_r_matrix(&run_dir.join("r_matrix.csv"), &log)?;
                write_runlog(&run_dir.join("runlog.jsonl"), &log)?;
                write_flags(&run_dir.join("final_flags.csv"), &log)?;
                if let Some(rows) = &log.buffer_snapshot {
                    write_buffer_csv(&run_dir.join("buffer.csv"), rows)?;
                }
                timing.push_str(&format!(
                    "{},{},{},{},{}\n",
                    log.learner, perm_id, log.duration_secs, log.update_steps, log.aux_memory_bytes
                ));
                logs.push((s, kind, log));
            }
            Err(err) => {
                failed += 1;
                std::fs::write(run_dir.join("FAILED"), format!("{err}\n"))?;
            }
        }
    }

    // Wall-clock timings are inherently non-deterministic, so they live in a
    // separate diagnostics file rather than the result artifacts.
    let diag_dir = out.join("diagnostics");
    std::fs::create_dir_all(&diag_dir)?;
    std::fs::write(diag_dir.join("timing.csv"), timing)?;

    // Per-learner metric reports averaged over permutations.
    let offline_r: Vec<Option<RMatrix>> = (0..schedules.len())
        .map(|s| {
            logs.iter()
                .find(|(ls, kind, _)| *ls == s && *kind == LearnerKind::Offline)
                .map(|(_, _, log)| log.r_matrix().expect("offline matrix"))
        })
        .collect();
    let metrics_dir = out.join("metrics");
    std::fs::create_dir_all(&metrics_dir)?;
    let mut summary = String::from("learner,omega,avg_accuracy,bwt,fwt,final_accuracy\n");
    for kind in &learners {
        let mut per = Vec::new();
        for (s, schedule) in schedules.iter().enumerate() {
            let Some((_, _, log)) = logs.iter().find(|(ls, k, _)| *ls == s && k == kind) else {
                continue;
            };
            let Some(off) = &offline_r[s] else { continue };
            let r = log.r_matrix()?;
            per.push(PermutationMetrics {
                permutation: schedule.permutation_id,
                omega: omega(&r, off)?,
                avg_accuracy: avg_accuracy(&r),
                bwt: bwt(&r)?,
                fwt: fwt(&r)?,
                final_accuracy: log.final_accuracy(),
            });
        }
        if per.is_empty() {
            continue;
        }
        let report = MetricsReport::from_permutations(kind.label(), per);
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(metrics_dir.join(format!("{}.json", kind.label())), json)?;
        summary.push_str(&format!(
            "{},{},{},{},{},{}\n",
            report.learner,
            report.omega,
            report.avg_accuracy,
            report.bwt,
            report.fwt,
            report.final_accuracy
        ));
    }
    std::fs::write(metrics_dir.join("summary.csv"), summary)?;

    if failed > 0 {
        return Err(RunError::PartialFailure { failed, total });
    }
    Ok(())
}

/// Loads the task datasets from `<out>/datasets`, generating and persisting
/// them first if absent.
pub fn ensure_datasets(config: &ExperimentConfig) -> Result<TaskPool, RunError> {
    let dir = config.out_dir.join("datasets");
    std::fs::create_dir_all(&dir)?;
    let mut datasets = Vec::with_capacity(NUM_TASKS);
    for kind in TaskKind::ALL {
        let train_path = dir.join(format!("{}_train.jsonl", kind.name()));
        let test_path = dir.join(format!("{}_test.jsonl", kind.name()));
        if train_path.exists() && test_path.exists() {
            datasets.push((Dataset::load(&train_path)?, Dataset::load(&test_path)?));
        } else {
            let (train, test) = generate_dataset(
                kind,
                config.train_per_task,
                config.test_per_task,
                config.seeds.dataset,
            )?;
            train.save(&train_path)?;
            test.save(&test_path)?;
            datasets.push((train, test));
        }
    }
    Ok(TaskPool { datasets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Seeds;

    fn tiny_pool(train: usize, test: usize) -> EncodedPool {
        TaskPool::generate(train, test, 7).unwrap().encode()
    }

    fn tiny_hyper() -> TrainHyper {
        TrainHyper {
            epochs: 2,
            base_epochs: 2,
            batch_size: 8,
            offline_max_epochs: 4,
            offline_patience: 1,
            ..TrainHyper::default()
        }
    }

    fn tiny_dims() -> ModelDims {
        ModelDims { input: crate::taskgen::PANEL_DIM, enc_hidden: 16, embed: 16, rel_hidden: 24 }
    }

    #[test]
    fn schedules_fix_task_and_sample_order() {
        let pool = tiny_pool(20, 8);
        let a = build_schedule(&pool, 2, 5);
        let b = build_schedule(&pool, 2, 5);
        assert_eq!(a.kinds, b.kinds);
        assert_eq!(a.sample_orders, b.sample_orders);
        let c = build_schedule(&pool, 2, 6);
        assert_ne!(a.sample_orders, c.sample_orders);
        assert_eq!(a.kinds[0], TaskKind::UpDown);
    }

    #[test]
    fn base_initialization_is_deterministic_and_first_task_only() {
        let pool = tiny_pool(24, 8);
        let schedule = build_schedule(&pool, 1, 3);
        let hyper = tiny_hyper();
        let a = base_initialize(&schedule, tiny_dims(), &hyper, 11).unwrap();
        let b = base_initialize(&schedule, tiny_dims(), &hyper, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn streaming_fine_tune_updates_once_per_sample() {
        let pool = tiny_pool(12, 8);
        let schedule = build_schedule(&pool, 1, 3);
        let hyper = tiny_hyper();
        let base = base_initialize(&schedule, tiny_dims(), &hyper, 1).unwrap();
        let log = stream_train(&LearnerKind::FineTuneStream, &base, &schedule, &hyper).unwrap();
        let expected: u64 = (1..NUM_TASKS).map(|t| schedule.train[t].len() as u64).sum();
        assert_eq!(log.update_steps, expected);
        assert_eq!(log.step_losses.len(), expected as usize);
        assert_eq!(log.eval_rows.len(), NUM_TASKS);
        assert!(log.eval_rows.iter().all(|r| r.accuracies.len() == NUM_TASKS));
    }

    #[test]
    fn first_matrix_row_is_the_post_base_evaluation() {
        let pool = tiny_pool(12, 8);
        let schedule = build_schedule(&pool, 1, 3);
        let hyper = tiny_hyper();
        let base = base_initialize(&schedule, tiny_dims(), &hyper, 1).unwrap();
        let mut scratch = Scratch::new(base.dims);
        let row = eval_all(&base, &schedule, &mut scratch).unwrap();
        let log = stream_train(&LearnerKind::FineTuneStream, &base, &schedule, &hyper).unwrap();
        assert_eq!(log.eval_rows[0].accuracies, row.accuracies);
    }

    #[test]
    fn replay_bookkeeping_grows_by_replay_size_plus_one_per_step() {
        let pool = tiny_pool(10, 6);
        let schedule = build_schedule(&pool, 1, 3);
        let hyper = tiny_hyper();
        let base = base_initialize(&schedule, tiny_dims(), &hyper, 1).unwrap();
        let r = 4;
        let kind = LearnerKind::PartialReplay {
            policy: PolicyKind::MinReplays,
            balance: Balance::Unbalanced,
            replay_size: r,
        };
        let log = stream_train(&kind, &base, &schedule, &hyper).unwrap();
        let rows = log.buffer_snapshot.as_ref().unwrap();
        let streamed: usize = (1..NUM_TASKS).map(|t| schedule.train[t].len()).sum();
        assert_eq!(rows.len(), schedule.train[0].len() + streamed);
        // every step updates exactly r replayed entries plus the new one
        let total: u64 = rows.iter().map(|row| row.replay_count).sum();
        let base_total = (schedule.train[0].len() * hyper.base_epochs) as u64;
        assert_eq!(total, base_total + (streamed as u64) * (r as u64 + 1));
    }

    #[test]
    fn zero_weight_distillation_reduces_to_plain_batch_fine_tuning() {
        let pool = tiny_pool(12, 6);
        let schedule = build_schedule(&pool, 1, 3);
        let hyper = tiny_hyper();
        let base = base_initialize(&schedule, tiny_dims(), &hyper, 2).unwrap();
        let plain = batch_train(&LearnerKind::FineTuneBatch, &base, &schedule, &hyper).unwrap();
        let distilled =
            batch_train(&LearnerKind::Distillation { lambda: 0.0 }, &base, &schedule, &hyper)
                .unwrap();
        for (a, b) in plain.eval_rows.iter().zip(&distilled.eval_rows) {
            assert_eq!(a.accuracies, b.accuracies);
        }
        assert_eq!(plain.step_losses, distilled.step_losses);
    }

    #[test]
    fn cumulative_replay_trains_on_the_union_of_seen_tasks() {
        let pool = tiny_pool(10, 6);
        let schedule = build_schedule(&pool, 1, 3);
        let hyper = tiny_hyper();
        let base = base_initialize(&schedule, tiny_dims(), &hyper, 2).unwrap();
        let log = batch_train(&LearnerKind::CumulativeReplay, &base, &schedule, &hyper).unwrap();
        let mut expected_steps = 0u64;
        for t in 1..NUM_TASKS {
            let union: usize = (0..=t).map(|k| schedule.train[k].len()).sum();
            expected_steps += (hyper.epochs * union.div_ceil(hyper.batch_size)) as u64;
        }
        assert_eq!(log.update_steps, expected_steps);
        assert!(log.aux_memory_bytes > 0);
    }

    #[test]
    fn offline_rows_come_from_prefix_trained_models() {
        let pool = tiny_pool(10, 6);
        let schedule = build_schedule(&pool, 1, 3);
        let hyper = tiny_hyper();
        let log = offline_train(&schedule, tiny_dims(), &hyper, 5).unwrap();
        assert_eq!(log.eval_rows.len(), NUM_TASKS);
        // early stopping caps the per-prefix epoch count
        let max_steps: u64 = (0..NUM_TASKS)
            .map(|t| {
                let union: usize = (0..=t).map(|k| schedule.train[k].len()).sum();
                let train = union - ((union as f64 * hyper.offline_val_fraction) as usize).max(1);
                (hyper.offline_max_epochs * train.div_ceil(hyper.batch_size)) as u64
            })
            .sum();
        assert!(log.update_steps <= max_steps);
    }

    #[test]
    fn divergence_is_reported_rather_than_propagated_as_nan() {
        let pool = tiny_pool(10, 6);
        let schedule = build_schedule(&pool, 1, 3);
        let mut hyper = tiny_hyper();
        hyper.adam = AdamHyper { learning_rate: 1e4, ..AdamHyper::default() };
        hyper.divergence_threshold = 10.0;
        let base = ModelParams::init(tiny_dims(), 3);
        let result = stream_train(&LearnerKind::FineTuneStream, &base, &schedule, &hyper);
        assert!(matches!(result, Err(RunError::Diverged { .. })));
    }

    #[test]
    fn canonical_flag_pooling_is_permutation_independent() {
        let pool = tiny_pool(10, 6);
        let hyper = tiny_hyper();
        let dims = tiny_dims();
        let mut accs = Vec::new();
        for perm in 1..=3 {
            let schedule = build_schedule(&pool, perm, 3);
            let base = base_initialize(&schedule, dims, &hyper, 9).unwrap();
            let log = stream_train(&LearnerKind::FineTuneStream, &base, &schedule, &hyper).unwrap();
            let flags = log.final_flags_canonical();
            assert_eq!(flags.len(), NUM_TASKS * schedule.test[0].len());
            accs.push(log.final_accuracy());
        }
        assert_eq!(accs.len(), 3);
    }

    #[test]
    fn artifacts_round_trip() {
        let pool = tiny_pool(10, 6);
        let schedule = build_schedule(&pool, 1, 3);
        let hyper = tiny_hyper();
        let base = base_initialize(&schedule, tiny_dims(), &hyper, 1).unwrap();
        let kind = LearnerKind::PartialReplay {
            policy: PolicyKind::Random,
            balance: Balance::Unbalanced,
            replay_size: 2,
        };
        let log = stream_train(&kind, &base, &schedule, &hyper).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let rpath = dir.path().join("r_matrix.csv");
        write_r_matrix(&rpath, &log).unwrap();
        let r = read_r_matrix(&rpath).unwrap();
        assert_eq!(r.rows(), log.r_matrix().unwrap().rows());

        let fpath = dir.path().join("final_flags.csv");
        write_flags(&fpath, &log).unwrap();
        assert_eq!(read_flags(&fpath).unwrap(), log.final_flags_canonical());

        let bpath = dir.path().join("buffer.csv");
        let rows = log.buffer_snapshot.as_ref().unwrap();
        write_buffer_csv(&bpath, rows).unwrap();
        assert_eq!(&read_buffer_csv(&bpath).unwrap(), rows);

        write_runlog(&dir.path().join("runlog.jsonl"), &log).unwrap();
    }

    #[test]
    fn experiments_persist_deterministic_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig {
            train_per_task: 10,
            test_per_task: 6,
            epochs: 1,
            batch_size: 8,
            permutations: crate::config::PermSelector::One(1),
            learners: vec!["fine_tune_stream".into()],
            seeds: Seeds::default(),
            out_dir: dir.path().join("a"),
            ..ExperimentConfig::default()
        };
        run_experiment(&config).unwrap();
        let summary_a =
            std::fs::read(config.out_dir.join("metrics").join("summary.csv")).unwrap();
        let rmatrix_a = std::fs::read(
            config.out_dir.join("perm1").join("fine_tune_stream").join("r_matrix.csv"),
        )
        .unwrap();

        let config_b = ExperimentConfig { out_dir: dir.path().join("b"), ..config };
        run_experiment(&config_b).unwrap();
        let summary_b =
            std::fs::read(config_b.out_dir.join("metrics").join("summary.csv")).unwrap();
        let rmatrix_b = std::fs::read(
            config_b.out_dir.join("perm1").join("fine_tune_stream").join("r_matrix.csv"),
        )
        .unwrap();
        assert_eq!(summary_a, summary_b);
        assert_eq!(rmatrix_a, rmatrix_b);
    }
}
