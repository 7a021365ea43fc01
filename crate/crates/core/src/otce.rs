//! Conditional-entropy transferability score on top of the transport plan.
//!
//! The plan between source and target pixels induces a joint distribution
//! over (source label, target label). The task difference is the conditional
//! entropy `H(Y_t | Y_s)` of that joint in nats, and the score is its negation:
//! higher (closer to 0) means more transferable.

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::ot::{
    compute_cost_matrix, sinkhorn, transport_cost, uniform_marginal, CouplingMatrix, SinkhornConfig,
};
use crate::pixelset::{standardize_pair, PixelSet};

/// Slack allowed on entropy bounds before a score is rejected.
const BOUND_SLACK: f64 = 1e-9;
/// Repetitions run concurrently only when one plan has at most this many cells.
const CONCURRENT_REPETITION_CELLS: usize = 4_000_000;

/// Empirical joint distribution of (source label, target label).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelJoint {
    /// `[|Y_s|, |Y_t|]`.
    pub joint: Array2<f64>,
    pub source_marginal: Array1<f64>,
}

impl LabelJoint {
    /// Wraps a joint table and derives the source marginal from its rows.
    pub fn from_joint(joint: Array2<f64>) -> Self {
        let source_marginal = joint.rows().into_iter().map(|r| r.sum()).collect();
        LabelJoint {
            joint,
            source_marginal,
        }
    }

    pub fn target_marginal(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.joint.ncols());
        for row in self.joint.rows() {
            out += &row;
        }
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.source_marginal.sum()
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy<I: IntoIterator<Item = f64>>(probabilities: I) -> f64 {
    -probabilities
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

const JOINT_ROW_BLOCK: usize = 256;

/// Sums plan mass over index pairs sharing a (source label, target label).
pub fn label_joint_from_coupling(
    coupling: &CouplingMatrix,
    source_labels: &[u16],
    target_labels: &[u16],
    class_counts: (usize, usize),
) -> Result<LabelJoint> {
    label_joint_with(
        coupling,
        source_labels,
        target_labels,
        class_counts,
        Execution::default(),
    )
}

pub(crate) fn label_joint_with(
    coupling: &CouplingMatrix,
    source_labels: &[u16],
    target_labels: &[u16],
    (ys, yt): (usize, usize),
    exec: Execution,
) -> Result<LabelJoint> {
    let (n, m) = coupling.shape();
    if source_labels.len() != n || target_labels.len() != m {
        return Err(Error::Dimension(format!(
            "coupling is {n}x{m} but label vectors have lengths {} and {}",
            source_labels.len(),
            target_labels.len()
        )));
    }
    if let Some(&l) = source_labels.iter().find(|&&l| l as usize >= ys) {
        return Err(Error::Validation(format!(
            "source label {l} outside {ys} declared classes"
        )));
    }
    if let Some(&l) = target_labels.iter().find(|&&l| l as usize >= yt) {
        return Err(Error::Validation(format!(
            "target label {l} outside {yt} declared classes"
        )));
    }

    let plan = coupling.values.as_standard_layout();
    let plan = plan.as_slice().expect("standard layout");
    let partial = exec::map_chunks(exec, plan, JOINT_ROW_BLOCK * m.max(1), |offset, block| {
        let first = offset / m.max(1);
        let mut table = vec![0.0f64; ys * yt];
        let mut row_acc = vec![0.0f64; yt];
        for (r, row) in block.chunks_exact(m.max(1)).enumerate() {
            row_acc.fill(0.0);
            for (p, &t) in row.iter().zip(target_labels) {
                row_acc[t as usize] += p;
            }
            let s = source_labels[first + r] as usize;
            for (cell, acc) in table[s * yt..(s + 1) * yt].iter_mut().zip(&row_acc) {
                *cell += acc;
            }
        }
        table
    });
    let mut table = vec![0.0f64; ys * yt];
    for part in &partial {
        for (t, p) in table.iter_mut().zip(part) {
            *t += p;
        }
    }
    Ok(LabelJoint::from_joint(
        Array2::from_shape_vec((ys, yt), table).expect("sized above"),
    ))
}

/// `H(Y_t | Y_s) = -sum P(ys, yt) ln(P(ys, yt) / P(ys))` in nats.
pub fn conditional_entropy(joint: &LabelJoint) -> f64 {
    let mut total = 0.0;
    for (row, &ps) in joint
        .joint
        .rows()
        .into_iter()
        .zip(joint.source_marginal.iter())
    {
        for &p in row.iter() {
            if p > 0.0 {
                total -= p * (p / ps).ln();
            }
        }
    }
    // every term is <= 0 before negation; clamp signed zero
    total.max(0.0)
}

/// Optional preprocessing applied before the transport solve. Both change
/// the score, so they are echoed in every report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Preprocess {
    /// Channel-wise standardization with statistics pooled over both sets.
    pub standardize_features: bool,
    /// Divide the cost matrix by its maximum (changes the effective epsilon).
    pub normalize_cost: bool,
}

/// Result of one source/target solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub task_difference: f64,
    pub domain_difference: f64,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_violation: f64,
    /// Entropy of the target label marginal under the plan.
    pub target_entropy: f64,
}

impl PairScore {
    pub fn otce(&self) -> f64 {
        -self.task_difference
    }
}

/// Scores one pair of pixel sets and also returns the transport plan.
pub fn score_pair_with_coupling(
    source: &PixelSet,
    target: &PixelSet,
    solver: &SinkhornConfig,
    normalize_cost: bool,
) -> Result<(PairScore, CouplingMatrix)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptySet("pixel sets must be non-empty".into()));
    }
    if source.feature_dim() != target.feature_dim() {
        return Err(Error::Dimension(format!(
            "source has {} channels, target has {}",
            source.feature_dim(),
            target.feature_dim()
        )));
    }
    solver.validate()?;

    let mut cost = compute_cost_matrix(
        source.features.view(),
        target.features.view(),
        solver.execution,
    )?;
    if normalize_cost {
        cost.normalize_by_max();
    }
    let a = uniform_marginal(source.len());
    let b = uniform_marginal(target.len());
    let solution = sinkhorn(&cost, a.view(), b.view(), solver)?;
    let domain_difference = transport_cost(&cost, &solution.coupling)?;
    drop(cost);

    let class_counts = (source.class_count as usize, target.class_count as usize);
    let joint = label_joint_with(
        &solution.coupling,
        &source.labels,
        &target.labels,
        class_counts,
        solver.execution,
    )?;
    let task_difference = conditional_entropy(&joint);
    let target_entropy = entropy(joint.target_marginal().iter().copied());

    let ln_yt = (class_counts.1 as f64).ln();
    if task_difference > target_entropy + BOUND_SLACK || task_difference > ln_yt + BOUND_SLACK {
        return Err(Error::Run(format!(
            "conditional entropy {task_difference} exceeds its bounds \
             (H(Y_t) = {target_entropy}, ln|Y_t| = {ln_yt})"
        )));
    }

    Ok((
        PairScore {
            task_difference,
            domain_difference,
            converged: solution.converged,
            iterations: solution.iterations,
            marginal_violation: solution.marginal_violation,
            target_entropy,
        },
        solution.coupling,
    ))
}

pub fn score_pair(
    source: &PixelSet,
    target: &PixelSet,
    solver: &SinkhornConfig,
    normalize_cost: bool,
) -> Result<PairScore> {
    score_pair_with_coupling(source, target, solver, normalize_cost).map(|(s, _)| s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementPolicy {
    /// Asking for more pixels than available is an error.
    #[default]
    Error,
    /// Use every available pixel instead.
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Every pixel equally likely.
    #[default]
    Uniform,
    /// Spread the draw as evenly as possible over the classes present.
    ClassBalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub pixels_per_sample: usize,
    pub repetitions: usize,
    pub seed: u64,
    #[serde(default)]
    pub replacement_policy: ReplacementPolicy,
    #[serde(default)]
    pub strategy: SamplingStrategy,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            pixels_per_sample: 10_000,
            repetitions: 10,
            seed: 0,
            replacement_policy: ReplacementPolicy::Error,
            strategy: SamplingStrategy::Uniform,
            execution: Execution::default(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pixels_per_sample == 0 {
            return Err(Error::Validation(
                "pixels per sample must be positive".into(),
            ));
        }
        if self.repetitions == 0 {
            return Err(Error::Validation("repetitions must be positive".into()));
        }
        Ok(())
    }
}

/// Settings echoed into every score report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    #[serde(rename = "N")]
    pub pixels_per_sample: usize,
    #[serde(rename = "K")]
    pub repetitions: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub log_domain: bool,
    pub sampling: SamplingStrategy,
    pub standardize_features: bool,
    pub normalize_cost: bool,
}

/// Averaged transferability score plus diagnostics. Entropies are in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferScore {
    pub otce: f64,
    pub task_difference: f64,
    pub domain_difference: f64,
    pub per_repetition: Vec<f64>,
    pub converged_repetitions: usize,
    #[serde(flatten)]
    pub config: ConfigEcho,
    pub unit: String,
}

impl TransferScore {
    fn from_pairs(pairs: &[PairScore], config: ConfigEcho) -> Self {
        let k = pairs.len() as f64;
        let task_difference = pairs.iter().map(|p| p.task_difference).sum::<f64>() / k;
        let domain_difference = pairs.iter().map(|p| p.domain_difference).sum::<f64>() / k;
        TransferScore {
            otce: -task_difference,
            task_difference,
            domain_difference,
            per_repetition: pairs.iter().map(PairScore::otce).collect(),
            converged_repetitions: pairs.iter().filter(|p| p.converged).count(),
            config,
            unit: "nats".into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score serializes")
    }
}

/// One solve on the full pixel sets, reported as a single-repetition score.
pub fn otce_single(
    source: &PixelSet,
    target: &PixelSet,
    solver: &SinkhornConfig,
    preprocess: Preprocess,
) -> Result<TransferScore> {
    let (source, target) = preprocessed(source, target, preprocess)?;
    let pair = score_pair(&source, &target, solver, preprocess.normalize_cost)?;
    let echo = echo(
        source.len(),
        1,
        0,
        solver,
        SamplingStrategy::Uniform,
        preprocess,
    );
    Ok(TransferScore::from_pairs(&[pair], echo))
}

fn preprocessed(
    source: &PixelSet,
    target: &PixelSet,
    preprocess: Preprocess,
) -> Result<(PixelSet, PixelSet)> {
    let mut source = source.clone();
    let mut target = target.clone();
    if preprocess.standardize_features {
        standardize_pair(&mut source, &mut target)?;
    }
    Ok((source, target))
}

fn echo(
    n: usize,
    k: usize,
    seed: u64,
    solver: &SinkhornConfig,
    sampling: SamplingStrategy,
    preprocess: Preprocess,
) -> ConfigEcho {
    ConfigEcho {
        pixels_per_sample: n,
        repetitions: k,
        seed,
        epsilon: solver.epsilon,
        max_iterations: solver.max_iterations,
        tolerance: solver.tolerance,
        log_domain: solver.log_domain,
        sampling,
        standardize_features: preprocess.standardize_features,
        normalize_cost: preprocess.normalize_cost,
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for repetition `k`, independent of how repetitions are scheduled.
pub fn repetition_seed(seed: u64, k: usize) -> u64 {
    splitmix64(seed ^ splitmix64(k as u64))
}

fn repetition_rngs(seed: u64, k: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let base = repetition_seed(seed, k);
    let mut source = ChaCha8Rng::seed_from_u64(base);
    source.set_stream(0);
    let mut target = ChaCha8Rng::seed_from_u64(base);
    target.set_stream(1);
    (source, target)
}

/// Draws `amount` distinct row indices, returned in ascending order.
fn draw_indices(
    set: &PixelSet,
    amount: usize,
    strategy: SamplingStrategy,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut picked = match strategy {
        SamplingStrategy::Uniform => index::sample(rng, set.len(), amount).into_vec(),
        SamplingStrategy::ClassBalanced => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.class_count as usize];
            for (i, &l) in set.labels.iter().enumerate() {
                by_class[l as usize].push(i);
            }
            // round-robin quotas over classes that still have pixels left
            let mut quota = vec![0usize; by_class.len()];
            let mut left = amount;
            while left > 0 {
                let mut progressed = false;
                for (q, members) in quota.iter_mut().zip(&by_class) {
                    if left > 0 && *q < members.len() {
                        *q += 1;
                        left -= 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            by_class
                .iter()
                .zip(&quota)
                .filter(|(_, &q)| q > 0)
                .flat_map(|(members, &q)| {
                    index::sample(rng, members.len(), q)
                        .into_iter()
                        .map(|k| members[k])
                        .collect::<Vec<_>>()
                })
                .collect()
        }
    };
    picked.sort_unstable();
    picked
}

/// Pixel count each repetition draws from both sets under `sampling`.
pub fn effective_sample_size(
    source: &PixelSet,
    target: &PixelSet,
    sampling: &SamplingConfig,
) -> Result<usize> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptySet("pixel sets must be non-empty".into()));
    }
    let available = source.len().min(target.len());
    let n = sampling.pixels_per_sample;
    if n <= available {
        return Ok(n);
    }
    match sampling.replacement_policy {
        ReplacementPolicy::Clamp => Ok(available),
        ReplacementPolicy::Error => Err(Error::Size(format!(
            "{n} pixels requested but only {} source and {} target pixels available",
            source.len(),
            target.len()
        ))),
    }
}

/// The sampled subsets used by repetition `k`.
pub fn repetition_sample(
    source: &PixelSet,
    target: &PixelSet,
    sampling: &SamplingConfig,
    k: usize,
) -> Result<(PixelSet, PixelSet)> {
    let n = effective_sample_size(source, target, sampling)?;
    let (mut rs, mut rt) = repetition_rngs(sampling.seed, k);
    let si = draw_indices(source, n, sampling.strategy, &mut rs);
    let ti = draw_indices(target, n, sampling.strategy, &mut rt);
    Ok((source.select(&si), target.select(&ti)))
}

/// Averages the score over `K` independent draws of `N` pixels from each set.
pub fn otce_sampled(
    source: &PixelSet,
    target: &PixelSet,
    sampling: &SamplingConfig,
    solver: &SinkhornConfig,
    preprocess: Preprocess,
) -> Result<TransferScore> {
    sampling.validate()?;
    solver.validate()?;
    let n = effective_sample_size(source, target, sampling)?;
    let classes = source.class_count.max(target.class_count) as usize;
    if n < classes {
        log::warn!("sampling {n} pixels for {classes} classes; rare classes may be missed");
    }
    let (source, target) = preprocessed(source, target, preprocess)?;

    let run = |k: usize| -> Result<PairScore> {
        let (s, t) = repetition_sample(&source, &target, sampling, k)?;
        score_pair(&s, &t, solver, preprocess.normalize_cost)
    };
    let concurrent = n.saturating_mul(n) <= CONCURRENT_REPETITION_CELLS;
    let exec = if concurrent {
        sampling.execution
    } else {
        Execution::Sequential
    };
    let pairs = exec::map_indices(exec, sampling.repetitions, run)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let echo = echo(
        n,
        sampling.repetitions,
        sampling.seed,
        solver,
        sampling.strategy,
        preprocess,
    );
    Ok(TransferScore::from_pairs(&pairs, echo))
}

/// Transport plan of repetition `k` of [`otce_sampled`], for diagnostics.
pub fn repetition_coupling(
    source: &PixelSet,
    target: &PixelSet,
    sampling: &SamplingConfig,
    solver: &SinkhornConfig,
    preprocess: Preprocess,
    k: usize,
) -> Result<CouplingMatrix> {
    sampling.validate()?;
    let (source, target) = preprocessed(source, target, preprocess)?;
    let (s, t) = repetition_sample(&source, &target, sampling, k)?;
    Ok(score_pair_with_coupling(&s, &t, solver, preprocess.normalize_cost)?.1)
}
