//! Transfer metrics over accuracy matrices, the subset-based significance
//! test, and replay-count histogram summaries.
//!
//! The accuracy matrix `R` is T x T: entry (i, j) is the test accuracy on
//! task j after learning task i. Omega normalizes row averages against an
//! offline learner's matrix; A averages the lower triangle; backward and
//! forward transfer average the strict lower/upper triangles.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::replay::BufferRow;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("accuracy matrix must be square and non-empty")]
    NotSquare,
    #[error("accuracy entries must lie in [0, 1], found {0}")]
    OutOfRange(f64),
    #[error("matrices must have matching shapes")]
    ShapeMismatch,
    #[error("offline row average is zero at row {0}")]
    ZeroOfflineAccuracy(usize),
    #[error("metric needs at least two tasks")]
    TooFewTasks,
    #[error("test pool of {pool} cannot fill {subsets} non-overlapping subsets")]
    PoolTooSmall { pool: usize, subsets: usize },
    #[error("paired samples must have equal, non-trivial lengths")]
    BadPairing,
}

/// T x T accuracy matrix with entries in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RMatrix {
    rows: Vec<Vec<f64>>,
}

impl RMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let t = rows.len();
        if t == 0 || rows.iter().any(|r| r.len() != t) {
            return Err(MetricsError::NotSquare);
        }
        for row in &rows {
            for &x in row {
                if !(0.0..=1.0).contains(&x) {
                    return Err(MetricsError::OutOfRange(x));
                }
            }
        }
        Ok(RMatrix { rows })
    }

    pub fn t(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Average accuracy over all tasks after learning task i.
    pub fn row_mean(&self, i: usize) -> f64 {
        self.rows[i].iter().sum::<f64>() / self.t() as f64
    }
}

/// Mean ratio of the learner's row averages to the offline learner's.
pub fn omega(r: &RMatrix, r_offline: &RMatrix) -> Result<f64, MetricsError> {
    if r.t() != r_offline.t() {
        return Err(MetricsError::ShapeMismatch);
    }
    let t = r.t();
    let mut sum = 0.0;
    for i in 0..t {
        let denom = r_offline.row_mean(i);
        if denom == 0.0 {
            return Err(MetricsError::ZeroOfflineAccuracy(i));
        }
        sum += r.row_mean(i) / denom;
    }
    Ok(sum / t as f64)
}

/// Average accuracy over the lower triangle including the diagonal.
pub fn avg_accuracy(r: &RMatrix) -> f64 {
    let t = r.t();
    let mut sum = 0.0;
    for i in 0..t {
        for j in 0..=i {
            sum += r.get(i, j);
        }
    }
    2.0 * sum / (t * (t + 1)) as f64
}

/// Backward transfer: how much later learning moved earlier-task accuracy.
pub fn bwt(r: &RMatrix) -> Result<f64, MetricsError> {
    let t = r.t();
    if t < 2 {
        return Err(MetricsError::TooFewTasks);
    }
    let mut sum = 0.0;
    for i in 1..t {
        for j in 0..i {
            sum += r.get(i, j) - r.get(j, j);
        }
    }
    Ok(2.0 * sum / (t * (t - 1)) as f64)
}

/// Forward transfer: accuracy on tasks not yet learned.
pub fn fwt(r: &RMatrix) -> Result<f64, MetricsError> {
    let t = r.t();
    if t < 2 {
        return Err(MetricsError::TooFewTasks);
    }
    let mut sum = 0.0;
    for i in 0..t {
        for j in i + 1..t {
            sum += r.get(i, j);
        }
    }
    Ok(2.0 * sum / (t * (t - 1)) as f64)
}

/// Partitions a shuffled test pool into `n_subsets` non-overlapping subsets
/// of equal size (remainder discarded) and returns each subset's accuracy
/// averaged across the runs. Reusing the same rng seed reproduces the same
/// partition, which is what pairs methods for the significance test.
pub fn subset_accuracies(
    flags_per_run: &[Vec<bool>],
    n_subsets: usize,
    rng: &mut StdRng,
) -> Result<Vec<f64>, MetricsError> {
    let pool = flags_per_run.first().map_or(0, |f| f.len());
    if flags_per_run.is_empty() || flags_per_run.iter().any(|f| f.len() != pool) {
        return Err(MetricsError::BadPairing);
    }
    let subset_size = pool / n_subsets;
    if subset_size == 0 {
        return Err(MetricsError::PoolTooSmall { pool, subsets: n_subsets });
    }
    let mut order: Vec<usize> = (0..pool).collect();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(n_subsets);
    for chunk in order.chunks_exact(subset_size).take(n_subsets) {
        let mut acc = 0.0;
        for flags in flags_per_run {
            let correct = chunk.iter().filter(|&&i| flags[i]).count();
            acc += correct as f64 / subset_size as f64;
        }
        out.push(acc / flags_per_run.len() as f64);
    }
    Ok(out)
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Which test statistic to build from the paired subset means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WelchVariant {
    /// Two-sample Welch t-test on the index-paired sets (the default).
    TwoSample,
    /// One-sample t-test on the per-index differences, for sensitivity
    /// analysis.
    PairedDifferences,
}

/// Two-sided p-value of the unequal-variance t-test between two sets of
/// paired subset accuracies.
pub fn welch_paired_test(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    welch_test(a, b, WelchVariant::TwoSample)
}

pub fn welch_test(a: &[f64], b: &[f64], variant: WelchVariant) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MetricsError::BadPairing);
    }
    match variant {
        WelchVariant::TwoSample => {
            if is_constant(a) && is_constant(b) {
                return Ok(if a[0] == b[0] { 1.0 } else { 0.0 });
            }
            let (ma, va) = mean_and_variance(a);
            let (mb, vb) = mean_and_variance(b);
            let na = a.len() as f64;
            let nb = b.len() as f64;
            let se2 = va / na + vb / nb;
            let t = (ma - mb) / se2.sqrt();
            let mut df_den = 0.0;
            if va > 0.0 {
                df_den += (va / na) * (va / na) / (na - 1.0);
            }
            if vb > 0.0 {
                df_den += (vb / nb) * (vb / nb) / (nb - 1.0);
            }
            let df = se2 * se2 / df_den;
            Ok(two_sided_t_p_value(t, df))
        }
        WelchVariant::PairedDifferences => {
            let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            if is_constant(&diffs) {
                return Ok(if diffs[0] == 0.0 { 1.0 } else { 0.0 });
            }
            let (md, vd) = mean_and_variance(&diffs);
            let n = diffs.len() as f64;
            let t = md / (vd / n).sqrt();
            Ok(two_sided_t_p_value(t, n - 1.0))
        }
    }
}

/// Two-sided tail probability of the t distribution.
pub fn two_sided_t_p_value(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t))
}

/// Cumulative distribution of Student's t with `df` degrees of freedom.
pub fn students_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        pi.ln() - (pi * x).sin().abs().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = LANCZOS[0];
        for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + LANCZOS_G + 0.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

/// Continued-fraction evaluation (modified Lentz) of the incomplete beta.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Step-down multiple-comparison correction. Rejections are a prefix of the
/// ascending p-value order.
pub fn holm_bonferroni(pvals: &[f64], alpha: f64) -> Vec<bool> {
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvals[i].partial_cmp(&pvals[j]).expect("p-values are not NaN"));
    let mut reject = vec![false; m];
    for (k, &idx) in order.iter().enumerate() {
        if pvals[idx] <= alpha / (m - k) as f64 {
            reject[idx] = true;
        } else {
            break;
        }
    }
    reject
}

/// Bins final replay counts per task: task id -> (replay count -> samples).
pub fn replay_histogram(rows: &[BufferRow]) -> BTreeMap<usize, BTreeMap<u64, u64>> {
    let mut hist: BTreeMap<usize, BTreeMap<u64, u64>> = BTreeMap::new();
    for row in rows {
        *hist.entry(row.task_id).or_default().entry(row.replay_count).or_default() += 1;
    }
    hist
}

/// Population variance of the replay counts in a buffer snapshot.
pub fn replay_count_variance(rows: &[BufferRow]) -> f64 {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.replay_count as f64).sum::<f64>() / n;
    rows.iter().map(|r| (r.replay_count as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Per-learner metric summary, averaged over permutations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub learner: String,
    pub omega: f64,
    pub avg_accuracy: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub final_accuracy: f64,
    pub per_permutation: Vec<PermutationMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationMetrics {
    pub permutation: usize,
    pub omega: f64,
    pub avg_accuracy: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub final_accuracy: f64,
}

impl MetricsReport {
    /// Builds the averaged report from per-permutation metrics.
    pub fn from_permutations(learner: String, per: Vec<PermutationMetrics>) -> MetricsReport {
        let n = per.len().max(1) as f64;
        let mean = |f: fn(&PermutationMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            learner,
            omega: mean(|p| p.omega),
            avg_accuracy: mean(|p| p.avg_accuracy),
            bwt: mean(|p| p.bwt),
            fwt: mean(|p| p.fwt),
            final_accuracy: mean(|p| p.final_accuracy),
            per_permutation: per,
        }
    }
}

/// One pairwise comparison against a baseline method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub baseline: String,
    pub method: String,
    pub p_value: f64,
    pub reject: bool,
}

/// Holm-corrected comparison family against one baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonFamily {
    pub baseline: String,
    pub pairs: Vec<PairResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub alpha: f64,
    pub n_subsets: usize,
    pub families: Vec<ComparisonFamily>,
}

/// Runs the full subset/Welch/Holm procedure: each non-baseline method is
/// compared to the baseline on identically partitioned subsets, and the
/// Holm correction is applied within the family.
pub fn compare_against_baseline(
    baseline: &str,
    methods: &[(String, Vec<Vec<bool>>)],
    n_subsets: usize,
    alpha: f64,
    subset_seed: u64,
) -> Result<ComparisonFamily, MetricsError> {
    let (_, base_flags) = methods
        .iter()
        .find(|(name, _)| name == baseline)
        .ok_or(MetricsError::BadPairing)?;
    let mut rng = StdRng::seed_from_u64(subset_seed);
    let base_means = subset_accuracies(base_flags, n_subsets, &mut rng)?;
    let mut names = Vec::new();
    let mut pvals = Vec::new();
    for (name, flags) in methods {
        if name == baseline {
            continue;
        }
        let mut rng = StdRng::seed_from_u64(subset_seed); // identical partition
        let means = subset_accuracies(flags, n_subsets, &mut rng)?;
        pvals.push(welch_paired_test(&means, &base_means)?);
        names.push(name.clone());
    }
    let rejects = holm_bonferroni(&pvals, alpha);
    Ok(ComparisonFamily {
        baseline: baseline.to_string(),
        pairs: names
            .into_iter()
            .zip(pvals)
            .zip(rejects)
            .map(|((method, p_value), reject)| PairResult {
                baseline: baseline.to_string(),
                method,
                p_value,
                reject,
            })
            .collect(),
    })
}
