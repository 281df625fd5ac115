//! The replay buffer and the selective replay policies.
//!
//! Every entry stores a raw score `s` for the buffer's policy. At selection
//! time scores are shifted so the buffer minimum is exactly 1, inverted for
//! the policies that prioritize low scores, and normalized into selection
//! probabilities. Samples are drawn without replacement by sequential
//! renormalized draws; balanced mode applies per-task quotas first.

use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    log_sum_exp, score_encoded, softmax, EncodedProblem, ModelParams, Scratch, NUM_CHOICES,
};

/// Keeps the inversion denominator non-zero.
pub const SCORE_EPSILON: f64 = 1e-7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("replay buffer is empty")]
    EmptyBuffer,
}

/// The seven selection policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    MinLogitDistance,
    MinConfidence,
    MinMargin,
    MaxLoss,
    MaxTimeSinceReplay,
    MinReplays,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Random,
        PolicyKind::MinLogitDistance,
        PolicyKind::MinConfidence,
        PolicyKind::MinMargin,
        PolicyKind::MaxLoss,
        PolicyKind::MaxTimeSinceReplay,
        PolicyKind::MinReplays,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::MinLogitDistance => "min_logit_distance",
            PolicyKind::MinConfidence => "min_confidence",
            PolicyKind::MinMargin => "min_margin",
            PolicyKind::MaxLoss => "max_loss",
            PolicyKind::MaxTimeSinceReplay => "max_time_since_replay",
            PolicyKind::MinReplays => "min_replays",
        }
    }

    pub fn parse(s: &str) -> Option<PolicyKind> {
        Self::ALL.iter().copied().find(|p| p.name() == s)
    }

    /// Random and MaxLoss keep their scores; every other policy inverts so
    /// the lowest shifted score gets the highest value.
    pub fn inverts(self) -> bool {
        !matches!(self, PolicyKind::Random | PolicyKind::MaxLoss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    Unbalanced,
    Balanced,
}

impl Balance {
    pub fn name(self) -> &'static str {
        match self {
            Balance::Unbalanced => "unbalanced",
            Balance::Balanced => "balanced",
        }
    }

    pub fn parse(s: &str) -> Option<Balance> {
        match s {
            "unbalanced" => Some(Balance::Unbalanced),
            "balanced" => Some(Balance::Balanced),
            _ => None,
        }
    }
}

/// Raw policy score for one sample given the network's candidate scores.
pub fn raw_score(
    policy: PolicyKind,
    scores: &[f64; NUM_CHOICES],
    label: usize,
    replay_count: u64,
    last_replay_step: u64,
) -> f64 {
    match policy {
        PolicyKind::Random => 1.0,
        PolicyKind::MinLogitDistance => scores[label].abs(),
        PolicyKind::MinConfidence => softmax(scores)[label],
        PolicyKind::MinMargin => {
            let p = softmax(scores);
            let best_other = p
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != label)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            p[label] - best_other
        }
        PolicyKind::MaxLoss => log_sum_exp(scores) - scores[label],
        PolicyKind::MaxTimeSinceReplay => last_replay_step as f64,
        PolicyKind::MinReplays => replay_count as f64,
    }
}

/// One stored sample with its selection bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub sample: EncodedProblem,
    pub label: usize,
    pub task_id: usize,
    pub raw_score: f64,
    pub replay_count: u64,
    pub last_replay_step: u64,
}

/// Unlimited-capacity buffer owned by one training loop.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub policy: PolicyKind,
    pub balance: Balance,
    /// Number of buffer samples mixed with each new streamed sample.
    pub replay_size: usize,
    pub entries: Vec<ReplayEntry>,
    pub global_step: u64,
}

/// Shifts scores so the minimum becomes exactly 1.
pub fn shift_scores(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    scores.iter().map(|s| s + (1.0 - min)).collect()
}

/// Identity for Random/MaxLoss; reciprocal with epsilon for the rest.
pub fn to_values(policy: PolicyKind, shifted: &[f64]) -> Vec<f64> {
    if policy.inverts() {
        shifted.iter().map(|s| 1.0 / (s + SCORE_EPSILON)).collect()
    } else {
        shifted.to_vec()
    }
}

impl ReplayBuffer {
    pub fn new(policy: PolicyKind, balance: Balance, replay_size: usize) -> Self {
        ReplayBuffer { policy, balance, replay_size, entries: Vec::new(), global_step: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn shifted_scores(&self) -> Result<Vec<f64>, ReplayError> {
        if self.entries.is_empty() {
            return Err(ReplayError::EmptyBuffer);
        }
        let raw: Vec<f64> = self.entries.iter().map(|e| e.raw_score).collect();
        Ok(shift_scores(&raw))
    }

    fn values(&self) -> Result<Vec<f64>, ReplayError> {
        Ok(to_values(self.policy, &self.shifted_scores()?))
    }

    /// Normalized selection probabilities over all entries.
    pub fn selection_probs(&self) -> Result<Vec<f64>, ReplayError> {
        let values = self.values()?;
        let total: f64 = values.iter().sum();
        Ok(values.into_iter().map(|v| v / total).collect())
    }

    /// Draws `replay_size` distinct entries according to the balance mode.
    /// A buffer smaller than the replay batch returns every entry.
    pub fn select(&self, rng: &mut StdRng) -> Vec<usize> {
        match self.balance {
            Balance::Unbalanced => self.sample_unbalanced(self.replay_size, rng),
            Balance::Balanced => self.sample_balanced(self.replay_size, rng),
        }
    }

    pub fn sample_unbalanced(&self, r: usize, rng: &mut StdRng) -> Vec<usize> {
        if self.entries.len() <= r {
            return (0..self.entries.len()).collect();
        }
        let mut values = self.values().expect("nonempty buffer");
        weighted_draws_without_replacement(&mut values, r, rng)
    }

    pub fn sample_balanced(&self, r: usize, rng: &mut StdRng) -> Vec<usize> {
        if self.entries.len() <= r {
            return (0..self.entries.len()).collect();
        }
        let values = self.values().expect("nonempty buffer");

        let mut tasks: Vec<usize> = self.entries.iter().map(|e| e.task_id).collect();
        tasks.sort_unstable();
        tasks.dedup();
        let caps: Vec<usize> = tasks
            .iter()
            .map(|t| self.entries.iter().filter(|e| e.task_id == *t).count())
            .collect();
        let quotas = balanced_quotas(r, &caps);

        let mut chosen = Vec::with_capacity(r);
        for (ti, task) in tasks.iter().enumerate() {
            if quotas[ti] == 0 {
                continue;
            }
            let members: Vec<usize> = (0..self.entries.len())
                .filter(|i| self.entries[*i].task_id == *task)
                .collect();
            let mut member_values: Vec<f64> = members.iter().map(|i| values[*i]).collect();
            let picks = weighted_draws_without_replacement(&mut member_values, quotas[ti], rng);
            chosen.extend(picks.into_iter().map(|local| members[local]));
        }
        chosen
    }

    /// After the network update: refresh the scores of the replayed entries
    /// from the post-update outputs and bump their bookkeeping. Entries that
    /// were not replayed are untouched.
    pub fn update_after_replay(&mut self, updates: &[(usize, [f64; NUM_CHOICES])], step: u64) {
        for (idx, scores) in updates {
            let entry = &mut self.entries[*idx];
            entry.replay_count += 1;
            entry.last_replay_step = step;
            entry.raw_score = raw_score(
                self.policy,
                scores,
                entry.label,
                entry.replay_count,
                entry.last_replay_step,
            );
        }
        self.global_step = step;
    }

    /// Appends a freshly streamed-and-trained sample.
    pub fn add_entry(
        &mut self,
        sample: EncodedProblem,
        task_id: usize,
        scores: &[f64; NUM_CHOICES],
        step: u64,
    ) {
        let label = sample.answer;
        let raw = raw_score(self.policy, scores, label, 1, step);
        self.entries.push(ReplayEntry {
            sample,
            label,
            task_id,
            raw_score: raw,
            replay_count: 1,
            last_replay_step: step,
        });
        self.global_step = step;
    }

    /// Snapshot rows for export and histogram tooling.
    pub fn export_rows(&self) -> Vec<BufferRow> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        let shifted = self.shifted_scores().expect("nonempty");
        let values = to_values(self.policy, &shifted);
        let total: f64 = values.iter().sum();
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| BufferRow {
                entry: i,
                task_id: e.task_id,
                raw_score: e.raw_score,
                value: values[i],
                prob: values[i] / total,
                replay_count: e.replay_count,
                last_replay_step: e.last_replay_step,
            })
            .collect()
    }
}

/// Quota assignment for balanced sampling: floor of r/n per task, remainder
/// one at a time to the least-represented task, and shortfalls from small
/// tasks redistributed to the rest.
fn balanced_quotas(r: usize, caps: &[usize]) -> Vec<usize> {
    let n = caps.len();
    let base = r / n;
    let mut quotas = vec![base; n];
    let assign_one = |quotas: &mut Vec<usize>, respect_caps: bool| -> bool {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if respect_caps && quotas[i] >= caps[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if quotas[i] < quotas[b] => best = Some(i),
                _ => {}
            }
        }
        if let Some(i) = best {
            quotas[i] += 1;
            true
        } else {
            false
        }
    };
    for _ in 0..r - base * n {
        assign_one(&mut quotas, false);
    }
    // clamp to capacity and hand the shortfall to tasks that still have room
    loop {
        let mut shortfall = 0;
        for i in 0..n {
            if quotas[i] > caps[i] {
                shortfall += quotas[i] - caps[i];
                quotas[i] = caps[i];
            }
        }
        if shortfall == 0 {
            break;
        }
        for _ in 0..shortfall {
            if !assign_one(&mut quotas, true) {
                return quotas; // every task exhausted; total stays below r
            }
        }
    }
    quotas
}

/// Sequential weighted draws without replacement. `values` must be strictly
/// positive; taken slots are zeroed in place.
fn weighted_draws_without_replacement(
    values: &mut [f64],
    count: usize,
    rng: &mut StdRng,
) -> Vec<usize> {
    let mut total: f64 = values.iter().sum();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut x = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, v) in values.iter().enumerate() {
            if *v <= 0.0 {
                continue;
            }
            if x < *v {
                pick = Some(i);
                break;
            }
            x -= *v;
        }
        // floating-point drift can push x past the last bucket
        let i = pick.unwrap_or_else(|| {
            values.iter().rposition(|v| *v > 0.0).expect("drawing from a non-empty pool")
        });
        out.push(i);
        total -= values[i];
        values[i] = 0.0;
    }
    out
}

/// Builds the buffer from the base-initialization data: one entry per
/// sample, scores from a forward pass with the post-base parameters, and
/// replay counts primed with the number of base epochs.
pub fn init_buffer_from_base(
    samples: Vec<EncodedProblem>,
    task_id: usize,
    params: &ModelParams,
    policy: PolicyKind,
    balance: Balance,
    replay_size: usize,
    base_epochs: u64,
) -> ReplayBuffer {
    let mut scratch = Scratch::new(params.dims);
    let mut buffer = ReplayBuffer::new(policy, balance, replay_size);
    for sample in samples {
        let scores = score_encoded(params, &sample, &mut scratch);
        let label = sample.answer;
        let raw = raw_score(policy, &scores, label, base_epochs, 0);
        buffer.entries.push(ReplayEntry {
            sample,
            label,
            task_id,
            raw_score: raw,
            replay_count: base_epochs,
            last_replay_step: 0,
        });
    }
    buffer
}

/// One exported buffer row (comma-separated in the artifact files).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferRow {
    pub entry: usize,
    pub task_id: usize,
    pub raw_score: f64,
    pub value: f64,
    pub prob: f64,
    pub replay_count: u64,
    pub last_replay_step: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode_problem, ModelDims};
    use crate::taskgen::{generate_problem, TaskKind};
    use rand::SeedableRng;

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    fn sample(seed: u64) -> EncodedProblem {
        encode_problem(&generate_problem(TaskKind::Center, &mut rng(seed)).unwrap())
    }

    /// Buffer with given raw scores and task ids, bypassing the model.
    fn buffer_with(policy: PolicyKind, scores: &[f64], tasks: &[usize]) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(policy, Balance::Unbalanced, 2);
        for (i, (&s, &t)) in scores.iter().zip(tasks).enumerate() {
            b.entries.push(ReplayEntry {
                sample: sample(i as u64),
                label: 0,
                task_id: t,
                raw_score: s,
                replay_count: 1,
                last_replay_step: 0,
            });
        }
        b
    }

    #[test]
    fn raw_scores_follow_their_definitions() {
        let uniform = [0.0; 8];
        assert_eq!(raw_score(PolicyKind::Random, &uniform, 3, 9, 9), 1.0);
        assert!((raw_score(PolicyKind::MinConfidence, &uniform, 2, 0, 0) - 0.125).abs() < 1e-15);

        let mut confident = [0.0; 8];
        confident[0] = 50.0;
        assert!((raw_score(PolicyKind::MinMargin, &confident, 0, 0, 0) - 1.0).abs() < 1e-9);
        assert!(raw_score(PolicyKind::MaxLoss, &confident, 0, 0, 0).abs() < 1e-9);

        let mut logits = [0.0; 8];
        logits[0] = 2.0;
        logits[1] = -1.0;
        assert_eq!(raw_score(PolicyKind::MinLogitDistance, &logits, 0, 0, 0), 2.0);
        assert_eq!(raw_score(PolicyKind::MinLogitDistance, &logits, 1, 0, 0), 1.0);

        assert_eq!(raw_score(PolicyKind::MaxTimeSinceReplay, &uniform, 0, 7, 42), 42.0);
        assert_eq!(raw_score(PolicyKind::MinReplays, &uniform, 0, 7, 42), 7.0);
    }

    #[test]
    fn margins_can_go_negative() {
        let mut wrong = [0.0; 8];
        wrong[1] = 50.0;
        assert!(raw_score(PolicyKind::MinMargin, &wrong, 0, 0, 0) < 0.0);
    }

    #[test]
    fn shifting_pins_the_minimum_at_one() {
        assert_eq!(shift_scores(&[-0.5, 0.0, 2.0]), vec![1.0, 1.5, 3.5]);
        assert_eq!(shift_scores(&[3.0, 3.0]), vec![1.0, 1.0]);
        assert_eq!(shift_scores(&[1.0, 2.5]), vec![1.0, 2.5]);
    }

    #[test]
    fn inversion_only_applies_to_the_low_score_policies() {
        let v = to_values(PolicyKind::MinConfidence, &[1.0, 2.0]);
        assert!((v[0] - 1.0).abs() < 1e-6);
        assert!((v[1] - 0.5).abs() < 1e-6);
        assert_eq!(to_values(PolicyKind::MaxLoss, &[1.0, 3.0]), vec![1.0, 3.0]);
        assert_eq!(to_values(PolicyKind::Random, &[1.0, 1.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn selection_probs_normalize() {
        let b = buffer_with(PolicyKind::MaxLoss, &[1.0, 1.0, 1.0, 1.0], &[0; 4]);
        let p = b.selection_probs().unwrap();
        assert_eq!(p, vec![0.25; 4]);

        let b = buffer_with(PolicyKind::MaxLoss, &[2.0, 1.0], &[0; 2]);
        let p = b.selection_probs().unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);

        let b = buffer_with(PolicyKind::MinConfidence, &[0.3, -0.2, 0.9, 0.1, 0.4], &[0; 5]);
        let p = b.selection_probs().unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let b = ReplayBuffer::new(PolicyKind::Random, Balance::Unbalanced, 4);
        assert_eq!(b.selection_probs(), Err(ReplayError::EmptyBuffer));
        assert_eq!(b.shifted_scores(), Err(ReplayError::EmptyBuffer));
    }

    #[test]
    fn inverted_policies_reverse_the_score_ordering() {
        let scores = [0.7, -0.3, 2.4, 1.1, 0.0];
        for policy in PolicyKind::ALL {
            let b = buffer_with(policy, &scores, &[0; 5]);
            let shifted = b.shifted_scores().unwrap();
            let p = b.selection_probs().unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    if shifted[i] < shifted[j] {
                        if policy.inverts() {
                            assert!(p[i] > p[j], "{policy:?}");
                        } else {
                            assert!(p[i] < p[j], "{policy:?}");
                        }
                    }
                }
            }
        }
        // Random policy always stores s = 1, so its probabilities are uniform.
        let b = buffer_with(PolicyKind::Random, &[1.0; 5], &[0; 5]);
        let p = b.selection_probs().unwrap();
        assert!(p.iter().all(|x| (x - 0.2).abs() < 1e-12));
    }

    #[test]
    fn degenerate_small_buffer_returns_everything() {
        let b = buffer_with(PolicyKind::Random, &[1.0, 1.0, 1.0], &[0; 3]);
        assert_eq!(b.sample_unbalanced(5, &mut rng(0)), vec![0, 1, 2]);
        assert_eq!(b.sample_balanced(3, &mut rng(0)), vec![0, 1, 2]);
    }

    #[test]
    fn uniform_sampling_frequencies_stay_within_three_sigma() {
        let b = buffer_with(PolicyKind::Random, &[1.0; 8], &[0; 8]);
        let mut counts = [0usize; 8];
        let mut r = rng(13);
        let draws = 10_000;
        for _ in 0..draws {
            for i in b.sample_unbalanced(1, &mut r) {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 / 8.0;
        let sigma = (draws as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - expected).abs() < 3.0 * sigma,
                "count {c} expected {expected} sigma {sigma}"
            );
        }
    }

    #[test]
    fn a_dominant_value_is_almost_always_selected() {
        let mut scores = vec![1.0; 9];
        scores.insert(0, 1e6);
        let b = buffer_with(PolicyKind::MaxLoss, &scores, &[0; 10]);
        let mut hits = 0;
        let mut r = rng(5);
        for _ in 0..2_000 {
            if b.sample_unbalanced(1, &mut r)[0] == 0 {
                hits += 1;
            }
        }
        assert!(hits as f64 / 2_000.0 > 0.99, "hit rate {}", hits as f64 / 2_000.0);
    }

    #[test]
    fn sampled_indices_are_distinct() {
        let b = buffer_with(PolicyKind::MaxLoss, &[1.0, 5.0, 2.0, 9.0, 4.0, 3.0, 7.0], &[0; 7]);
        let mut r = rng(2);
        for _ in 0..200 {
            let mut picks = b.sample_unbalanced(4, &mut r);
            picks.sort_unstable();
            picks.dedup();
            assert_eq!(picks.len(), 4);
        }
    }

    #[test]
    fn balanced_quotas_follow_the_floor_and_remainder_rule() {
        assert_eq!(balanced_quotas(4, &[10, 10]), vec![2, 2]);
        assert_eq!(balanced_quotas(4, &[10, 10, 10]), vec![2, 1, 1]);
        assert_eq!(balanced_quotas(7, &[10, 10, 10]), vec![3, 2, 2]);
        // shortfall: first task only has one entry
        assert_eq!(balanced_quotas(4, &[1, 10, 10]), vec![1, 2, 1]);
        // totals always reach r when capacity allows
        assert_eq!(balanced_quotas(6, &[1, 2, 10]).iter().sum::<usize>(), 6);
    }

    #[test]
    fn balanced_sampling_respects_quotas() {
        let tasks = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2];
        let scores = vec![1.0; tasks.len()];
        let mut b = buffer_with(PolicyKind::Random, &scores, &tasks);
        b.balance = Balance::Balanced;
        let mut r = rng(3);
        let picks = b.sample_balanced(4, &mut r);
        assert_eq!(picks.len(), 4);
        let per_task: Vec<usize> = (0..3)
            .map(|t| picks.iter().filter(|i| b.entries[**i].task_id == t).count())
            .collect();
        assert_eq!(per_task, vec![2, 1, 1]);
    }

    #[test]
    fn replay_updates_touch_only_the_replayed_entries() {
        let mut b = buffer_with(PolicyKind::MinReplays, &[1.0, 1.0, 1.0], &[0; 3]);
        let before = b.entries[2].clone();
        let scores = [0.0; 8];
        b.update_after_replay(&[(0, scores), (1, scores)], 42);
        assert_eq!(b.entries[0].replay_count, 2);
        assert_eq!(b.entries[0].last_replay_step, 42);
        assert_eq!(b.entries[0].raw_score, 2.0); // MinReplays stores the count
        assert_eq!(b.entries[2], before);
        assert_eq!(b.global_step, 42);
    }

    #[test]
    fn max_time_scores_track_the_replay_step() {
        let mut b = buffer_with(PolicyKind::MaxTimeSinceReplay, &[0.0, 0.0], &[0; 2]);
        b.update_after_replay(&[(1, [0.0; 8])], 42);
        assert_eq!(b.entries[1].raw_score, 42.0);
        assert_eq!(b.entries[0].raw_score, 0.0);
    }

    #[test]
    fn base_initialization_fills_the_buffer() {
        let params = ModelParams::init(ModelDims::default(), 3);
        let samples: Vec<EncodedProblem> = (0..20).map(sample).collect();
        let b = init_buffer_from_base(
            samples,
            0,
            &params,
            PolicyKind::MinReplays,
            Balance::Unbalanced,
            4,
            50,
        );
        assert_eq!(b.len(), 20);
        assert!(b.entries.iter().all(|e| e.replay_count == 50));
        assert!(b.entries.iter().all(|e| e.last_replay_step == 0));
        assert_eq!(b.global_step, 0);
        // equal counts mean uniform selection probabilities
        let p = b.selection_probs().unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 20.0).abs() < 1e-12));
    }

    #[test]
    fn adding_an_entry_records_the_stream_step() {
        let mut b = buffer_with(PolicyKind::Random, &[1.0, 1.0], &[0; 2]);
        let n = b.len();
        b.add_entry(sample(99), 3, &[0.0; 8], 17);
        assert_eq!(b.len(), n + 1);
        let e = b.entries.last().unwrap();
        assert_eq!(e.replay_count, 1);
        assert_eq!(e.last_replay_step, 17);
        assert_eq!(e.task_id, 3);
    }

    #[test]
    fn export_rows_cover_the_buffer_and_normalize() {
        let b = buffer_with(PolicyKind::MaxLoss, &[0.5, 1.5, 2.5], &[0, 1, 1]);
        let rows = b.export_rows();
        assert_eq!(rows.len(), 3);
        let total: f64 = rows.iter().map(|r| r.prob).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(rows[0].task_id, 0);
    }
}
