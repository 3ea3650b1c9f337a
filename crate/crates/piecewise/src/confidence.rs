//! The confidence loss and its batch-size calculator.
//!
//! A model is maximally confident on a batch when the round trip
//! label → instance → label (see [`crate::transmission`]) is the identity:
//! the label transition matrix `T` is diagonal. The confidence loss
//! penalizes the worst label,
//!
//! ```text
//! loss = max_y f(1_y || T(.|y))
//! ```
//!
//! where `f` is a divergence from [`crate::divergence`] and `1_y` the
//! point mass at `y`. For KL this reduces to `max_y -log T(y,y)`; for
//! squared Hellinger to `max_y 1 - sqrt(T(y,y))`. Both are zero exactly
//! when every label transmits perfectly and are driven to their clamped
//! maximum by collapsed models, which is what makes the loss usable as the
//! sole training signal: confidence alone rules out the constant model.
//!
//! Minimizing the loss over minibatches instead of all label-complete
//! subsets is sound once batches are themselves label-complete with high
//! probability; [`batch_size_bound`] and [`self_consistent_batch_size`]
//! compute how large a batch that requires.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{predict_eval, CondDistBatch, ModelParams};
use crate::tensor::Tensor;
use crate::transmission::{label_transition, label_transition_node};
use crate::PROB_EPS;

/// Largest set size accepted by [`exact_worst_case_loss`]; the subset
/// enumeration is exponential.
pub const MAX_EXACT_SET: usize = 12;

fn default_divergence() -> DivergenceKind {
    DivergenceKind::Kl
}

fn default_epsilon() -> f64 {
    1e-4
}

/// Settings for the confidence loss. Ties in the worst-label max always
/// break toward the lowest label index, so runs are reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceConfig {
    /// Minibatch size; must be at least the number of classes or no batch
    /// can ever be label-complete.
    pub batch_size: usize,
    /// Divergence measuring transmission failure per label.
    #[serde(default = "default_divergence")]
    pub divergence: DivergenceKind,
    /// Tolerated probability that some batch of a run misses a label.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl ConfidenceConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.batch_size < num_classes {
            return Err(Error::config(format!(
                "batch_size {} is smaller than the number of classes {num_classes}; \
                 no batch can be label-complete",
                self.batch_size
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!(
                "epsilon must lie in (0,1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Smallest batch size guaranteeing that `num_events` independent batches
/// are all label-complete except with probability `epsilon`, when every
/// label has prior mass at least `prior_min`.
///
/// `num_events` is the union-bound event count: number of batches times
/// number of labels. The bound is `⌊ln(num_events/ε)/prior_min⌋ + 1`.
pub fn batch_size_bound(prior_min: f64, num_events: f64, epsilon: f64) -> Result<u64> {
    if !(prior_min > 0.0 && prior_min <= 1.0) {
        return Err(Error::contract(format!(
            "prior_min must lie in (0,1], got {prior_min}"
        )));
    }
    if !(num_events >= 1.0) {
        return Err(Error::contract(format!(
            "num_events must be at least 1, got {num_events}"
        )));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::contract(format!(
            "epsilon must lie in (0,1), got {epsilon}"
        )));
    }
    Ok(((num_events / epsilon).ln() / prior_min).floor() as u64 + 1)
}

/// Batch size for a whole training run, accounting for the batch count
/// itself depending on `b`: the smallest integer with
///
/// ```text
/// prior_min * b > ln(sweeps * set_size * num_classes / (epsilon * b))
/// ```
///
/// where `sweeps * set_size / b` batches are drawn in total. Solved by
/// fixed-point iteration on `x ← ln(K/x)/prior_min`, then adjusted to the
/// exact integer threshold (the left side is strictly increasing in `b`).
pub fn self_consistent_batch_size(
    prior_min: f64,
    sweeps: f64,
    set_size: f64,
    num_classes: f64,
    epsilon: f64,
) -> Result<u64> {
    if !(prior_min > 0.0 && prior_min <= 1.0) {
        return Err(Error::contract(format!(
            "prior_min must lie in (0,1], got {prior_min}"
        )));
    }
    if !(sweeps >= 1.0 && set_size >= 1.0 && num_classes >= 1.0) {
        return Err(Error::contract(
            "sweeps, set_size and num_classes must all be at least 1".to_string(),
        ));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::contract(format!(
            "epsilon must lie in (0,1), got {epsilon}"
        )));
    }
    let k = sweeps * set_size * num_classes / epsilon;
    let mut x = 1.0_f64;
    for _ in 0..200 {
        let next = (k / x).ln() / prior_min;
        if (next - x).abs() < 1e-10 {
            x = next;
            break;
        }
        x = next;
    }
    let satisfied = |b: u64| prior_min * b as f64 > (k / b as f64).ln();
    let mut b = (x.floor() as u64).max(1);
    while !satisfied(b) {
        b += 1;
    }
    while b > 1 && satisfied(b - 1) {
        b -= 1;
    }
    Ok(b)
}

/// Builds the confidence loss as a graph node over a probability node `q`
/// (rows are per-instance label distributions). Returns a 1x1 node.
pub fn confidence_loss_node(g: &mut Graph, q: NodeId, kind: DivergenceKind) -> NodeId {
    let t = label_transition_node(g, q);
    let d = g.diag_part(t);
    let clamped = g.clamp(d, PROB_EPS, 1.0);
    let per_label = match kind {
        DivergenceKind::Kl => {
            let lg = g.log(clamped);
            g.neg(lg)
        }
        DivergenceKind::SqHellinger => {
            let rt = g.sqrt(clamped);
            let neg = g.neg(rt);
            g.add_const(neg, 1.0)
        }
    };
    g.max_rows(per_label)
}

/// Plain-value twin of [`confidence_loss_node`], using the same clamping.
pub fn confidence_loss_value(q: &CondDistBatch, kind: DivergenceKind) -> f64 {
    let t = label_transition(q);
    let mut worst = f64::NEG_INFINITY;
    for y in 0..t.rows() {
        let d = t.get(y, y).clamp(PROB_EPS, 1.0);
        let loss = match kind {
            DivergenceKind::Kl => -d.ln(),
            DivergenceKind::SqHellinger => 1.0 - d.sqrt(),
        };
        if loss > worst {
            worst = loss;
        }
    }
    worst
}

/// Brute-force worst case over *every* label-complete subset of a small
/// labeled set: the quantity the minibatch loss relaxes. A subset is
/// label-complete when its true labels cover all model classes.
///
/// Exponential in `|U|`; only sets of at most [`MAX_EXACT_SET`] instances
/// are accepted.
pub fn exact_worst_case_loss(
    params: &ModelParams,
    u: &Dataset,
    kind: DivergenceKind,
) -> Result<f64> {
    let labels = u
        .labels
        .as_deref()
        .ok_or_else(|| Error::contract("exact worst-case loss needs true labels".to_string()))?;
    let n = u.len();
    if n == 0 || n > MAX_EXACT_SET {
        return Err(Error::contract(format!(
            "exact worst-case loss enumerates subsets; set size must be in 1..={MAX_EXACT_SET}, got {n}"
        )));
    }
    let num_classes = params.spec.num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for a {num_classes}-class model"
        )));
    }
    // Eval-mode rows are independent, so one prediction covers all subsets.
    let q = predict_eval(params, &u.x)?;
    let qt = q.tensor();
    let k = qt.cols();
    let mut worst: Option<f64> = None;
    for mask in 1u32..(1 << n) {
        let mut covered = vec![false; num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if mask & (1 << i) != 0 {
                covered[l] = true;
            }
        }
        if !covered.iter().all(|&c| c) {
            continue;
        }
        let mut rows = Vec::new();
        for (i, _) in labels.iter().enumerate() {
            if mask & (1 << i) != 0 {
                rows.extend_from_slice(qt.row(i));
            }
        }
        let sub = CondDistBatch::new(Tensor::from_vec(rows.len() / k, k, rows)?)?;
        let loss = confidence_loss_value(&sub, kind);
        worst = Some(worst.map_or(loss, |w: f64| w.max(loss)));
    }
    worst.ok_or(Error::NoLabelCompleteSubset)
}

/// Draws `b` distinct uniform indices from a set of `len` instances.
pub fn sample_batch(len: usize, b: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if b == 0 {
        return Err(Error::contract("batch size must be positive".to_string()));
    }
    if b > len {
        return Err(Error::contract(format!(
            "batch size {b} exceeds set size {len}"
        )));
    }
    Ok(rand::seq::index::sample(rng, len, b).into_vec())
}
