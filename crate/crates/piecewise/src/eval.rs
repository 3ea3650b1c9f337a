//! Evaluation: clustering accuracy under the best label permutation,
//! per-instance stability statistics, and 2-D heatmap grids.
//!
//! An unsupervised model's cluster indices carry no inherent meaning, so
//! accuracy against ground truth is measured after the most favorable
//! relabeling: `max_π (1/n) Σ 1{y_i = π(l_i)}`, solved exactly with the
//! Hungarian assignment algorithm on the co-occurrence counts rather than
//! by enumerating all `|Y|!` permutations.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{score_matrices, ModelParams};
use crate::smoothness::{fisher_top_eig, fisher_trace, StabilityReport};
use crate::tensor::Tensor;

/// Outcome of matching predicted clusters against true labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `permutation[l]` is the true label assigned to predicted cluster
    /// `l`; always a bijection.
    pub permutation: Vec<usize>,
    /// Fraction of instances whose permuted prediction matches the truth.
    pub accuracy: f64,
    /// `confusion[t][p]` counts instances with true label `t` and
    /// predicted cluster `p`.
    pub confusion: Vec<Vec<u64>>,
}

/// Minimum-cost perfect assignment on a square cost matrix via the
/// O(n³) potential (Jonker-Volgenant style) formulation. Returns
/// `assignment[row] = column`. Deterministic: among equal-cost solutions
/// the scan order fixes the result.
fn hungarian_min(cost: &Tensor) -> Vec<usize> {
    let n = cost.rows();
    debug_assert_eq!(n, cost.cols());
    // 1-indexed potentials with column 0 as the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// Matches predicted cluster indices against true labels with the optimal
/// permutation and reports the resulting accuracy and confusion counts.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<AssignmentResult> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::contract("cannot score an empty label list"));
    }
    let k = pred
        .iter()
        .chain(truth.iter())
        .max()
        .map_or(0, |&m| m + 1);
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    // Maximize matches: minimize negated counts w[pred][true].
    let mut cost = Tensor::zeros(k, k);
    for t in 0..k {
        for p in 0..k {
            cost.set(p, t, -(confusion[t][p] as f64));
        }
    }
    let permutation = hungarian_min(&cost);
    let matched: u64 = permutation
        .iter()
        .enumerate()
        .map(|(p, &t)| confusion[t][p])
        .sum();
    Ok(AssignmentResult {
        permutation,
        accuracy: matched as f64 / pred.len() as f64,
        confusion,
    })
}

/// Five-number summary plus means of one predicted class's stability
/// statistics, for box plots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSummary {
    pub label: usize,
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_fisher_trace: f64,
    /// min, lower quartile, median, upper quartile, max.
    pub fisher_trace_five_number: [f64; 5],
    pub confidence_five_number: [f64; 5],
    pub top_eigenvalue_five_number: [f64; 5],
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn five_number(values: &[f64]) -> [f64; 5] {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    [
        sorted[0],
        quantile(&sorted, 0.25),
        quantile(&sorted, 0.5),
        quantile(&sorted, 0.75),
        sorted[sorted.len() - 1],
    ]
}

/// Per-instance stability rows plus per-predicted-class summaries. Labels
/// in the dataset are not consulted; the summaries group by the model's
/// own clusters.
pub fn stability_stats(
    params: &ModelParams,
    ds: &Dataset,
) -> Result<(Vec<StabilityReport>, Vec<ClassSummary>)> {
    let scores = score_matrices(params, &ds.x)?;
    let mut reports = Vec::with_capacity(scores.len());
    for (index, sm) in scores.iter().enumerate() {
        let (mut predicted_label, mut confidence) = (0usize, f64::NEG_INFINITY);
        for (y, &q) in sm.q.iter().enumerate() {
            if q > confidence {
                confidence = q;
                predicted_label = y;
            }
        }
        reports.push(StabilityReport {
            index,
            predicted_label,
            confidence,
            fisher_trace: fisher_trace(sm),
            top_eigenvalue: fisher_top_eig(sm),
        });
    }
    let num_classes = params.spec.num_classes;
    let mut summaries = Vec::new();
    for label in 0..num_classes {
        let rows: Vec<&StabilityReport> = reports
            .iter()
            .filter(|r| r.predicted_label == label)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let traces: Vec<f64> = rows.iter().map(|r| r.fisher_trace).collect();
        let confs: Vec<f64> = rows.iter().map(|r| r.confidence).collect();
        let eigs: Vec<f64> = rows.iter().map(|r| r.top_eigenvalue).collect();
        summaries.push(ClassSummary {
            label,
            count: rows.len(),
            mean_confidence: confs.iter().sum::<f64>() / confs.len() as f64,
            mean_fisher_trace: traces.iter().sum::<f64>() / traces.len() as f64,
            fisher_trace_five_number: five_number(&traces),
            confidence_five_number: five_number(&confs),
            top_eigenvalue_five_number: five_number(&eigs),
        });
    }
    Ok((reports, summaries))
}

/// One evaluated grid point of a 2-D heatmap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub x: f64,
    pub y: f64,
    /// Q(1|x,y): the conditional probability of class 1.
    pub prob: f64,
    /// Fisher criterion tr(A Aᵀ).
    pub trace: f64,
    /// Shannon entropy of Q(.|x,y) in nats.
    pub entropy: f64,
}

/// Evaluates conditional probability, Fisher criterion and conditional
/// entropy on a `resolution x resolution` grid over the bounding box.
/// Rows scan y from `ymin` to `ymax`, x fastest. Models with more than two
/// inputs cannot be mapped to a plane and are rejected.
pub fn heatmap_grid(
    params: &ModelParams,
    bbox: (f64, f64, f64, f64),
    resolution: usize,
) -> Result<Vec<HeatmapRow>> {
    if params.spec.input_dim != 2 {
        return Err(Error::contract(format!(
            "heatmaps need a 2-input model, this one takes {} inputs",
            params.spec.input_dim
        )));
    }
    let (xmin, xmax, ymin, ymax) = bbox;
    if !(xmin < xmax && ymin < ymax) || !bbox_finite(bbox) {
        return Err(Error::contract(format!(
            "invalid bounding box ({xmin}, {xmax}, {ymin}, {ymax})"
        )));
    }
    if resolution < 2 {
        return Err(Error::contract("resolution must be at least 2"));
    }
    let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (resolution - 1) as f64;
    let mut points = Vec::with_capacity(resolution * resolution * 2);
    for yi in 0..resolution {
        for xi in 0..resolution {
            points.push(step(xmin, xmax, xi));
            points.push(step(ymin, ymax, yi));
        }
    }
    let grid = Tensor::from_vec(resolution * resolution, 2, points)?;
    let scores = score_matrices(params, &grid)?;
    let mut rows = Vec::with_capacity(scores.len());
    for (i, sm) in scores.iter().enumerate() {
        let entropy = -sm
            .q
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| q * q.ln())
            .sum::<f64>();
        rows.push(HeatmapRow {
            x: grid.get(i, 0),
            y: grid.get(i, 1),
            prob: sm.q[1],
            trace: fisher_trace(sm),
            entropy: entropy.max(0.0),
        });
    }
    Ok(rows)
}

fn bbox_finite(bbox: (f64, f64, f64, f64)) -> bool {
    bbox.0.is_finite() && bbox.1.is_finite() && bbox.2.is_finite() && bbox.3.is_finite()
}

/// Writes stability rows as CSV with columns index, predicted_label,
/// confidence, fisher_trace, top_eigenvalue.
pub fn write_stability_csv<W: std::io::Write>(reports: &[StabilityReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in reports {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes heatmap rows as CSV with columns x, y, prob, trace, entropy.
pub fn write_heatmap_csv<W: std::io::Write>(rows: &[HeatmapRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, MlpSpec};
    use itertools::Itertools;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn brute_force_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
        (0..k)
            .permutations(k)
            .map(|perm| {
                pred.iter()
                    .zip(truth)
                    .filter(|(&p, &t)| perm[p] == t)
                    .count() as f64
                    / pred.len() as f64
            })
            .fold(0.0, f64::max)
    }

    fn constant_model() -> ModelParams {
        let spec = MlpSpec::new(2, vec![4], 2);
        let mut params = init(&spec, 0).unwrap();
        let last = params.layers.last_mut().unwrap();
        last.weight = Tensor::zeros(last.weight.rows(), last.weight.cols());
        last.bias = Tensor::zeros(1, last.bias.cols());
        params
    }

    #[test]
    fn perfect_prediction_is_identity() {
        let truth = vec![0, 1, 2, 0, 1, 2];
        let res = clustering_accuracy(&truth, &truth).unwrap();
        assert_eq!(res.accuracy, 1.0);
        assert_eq!(res.permutation, vec![0, 1, 2]);
    }

    #[test]
    fn swapped_labels_still_score_one() {
        let truth = vec![0, 0, 1, 1];
        let pred = vec![1, 1, 0, 0];
        let res = clustering_accuracy(&pred, &truth).unwrap();
        assert_eq!(res.accuracy, 1.0);
        assert_eq!(res.permutation, vec![1, 0]);
    }

    #[test]
    fn worked_two_class_example() {
        let pred = vec![0, 0, 0, 1, 1, 1];
        let truth = vec![0, 0, 1, 1, 1, 0];
        let res = clustering_accuracy(&pred, &truth).unwrap();
        assert!((res.accuracy - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(res.accuracy, brute_force_accuracy(&pred, &truth, 2));
        assert_eq!(res.confusion[1][0], 1); // true 1 predicted 0
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_cases() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..300 {
            let k = rng.random_range(2..=6);
            let n = rng.random_range(k..40);
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let res = clustering_accuracy(&pred, &truth).unwrap();
            let brute = brute_force_accuracy(&pred, &truth, k);
            assert!(
                (res.accuracy - brute).abs() < 1e-12,
                "hungarian {} vs brute force {brute} (k={k}, n={n})",
                res.accuracy
            );
            // The result covers the labels that actually occur; a label
            // absent from both lists cannot enlarge it.
            let k_seen = pred.iter().chain(&truth).max().unwrap() + 1;
            let mut seen = res.permutation.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..k_seen).collect::<Vec<_>>(), "not a bijection");
        }
    }

    #[test]
    fn accuracy_is_invariant_under_relabeling() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..50 {
            let k = rng.random_range(2..=5);
            let n = rng.random_range(k..60);
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let base = clustering_accuracy(&pred, &truth).unwrap().accuracy;
            let mut relabel: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                let j = rng.random_range(0..=i);
                relabel.swap(i, j);
            }
            let relabeled: Vec<usize> = pred.iter().map(|&p| relabel[p]).collect();
            let swapped = clustering_accuracy(&relabeled, &truth).unwrap().accuracy;
            assert_eq!(base, swapped);
        }
    }

    #[test]
    fn random_predictions_score_near_chance() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let k = 4;
        let n = 10_000;
        let truth: Vec<usize> = (0..n).map(|i| i % k).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let acc = clustering_accuracy(&pred, &truth).unwrap().accuracy;
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        // The permutation max inflates the score slightly above chance.
        assert!(acc >= p - 3.0 * sigma, "accuracy {acc} below chance band");
        assert!(acc <= p + 4.0 * sigma, "accuracy {acc} above chance band");
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(clustering_accuracy(&[0, 1], &[0]).is_err());
        assert!(clustering_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn constant_model_stability() {
        let params = constant_model();
        let ds = Dataset::new(
            Tensor::from_vec(5, 2, vec![0.1, 0.2, -0.5, 0.3, 0.8, -0.1, 0.0, 0.0, 1.0, 1.0])
                .unwrap(),
            None,
            "fixture",
        )
        .unwrap();
        let (reports, summaries) = stability_stats(&params, &ds).unwrap();
        assert_eq!(reports.len(), 5);
        for r in &reports {
            assert_eq!(r.fisher_trace, 0.0);
            assert_eq!(r.top_eigenvalue, 0.0);
            assert!((r.confidence - 0.5).abs() < 1e-12);
        }
        // All instances land in one class (lowest-index argmax of a
        // uniform distribution).
        assert_eq!(summaries.len(), 1);
        assert_eq!(summaries[0].label, 0);
        assert_eq!(summaries[0].count, 5);
    }

    #[test]
    fn class_summary_means_match_rows() {
        let spec = MlpSpec::new(3, vec![6], 3);
        let params = init(&spec, 8).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let ds = Dataset::new(
            Tensor::from_vec(
                40,
                3,
                (0..120).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap(),
            None,
            "fixture",
        )
        .unwrap();
        let (reports, summaries) = stability_stats(&params, &ds).unwrap();
        let total: usize = summaries.iter().map(|s| s.count).sum();
        assert_eq!(total, 40);
        for s in &summaries {
            let class: Vec<&StabilityReport> = reports
                .iter()
                .filter(|r| r.predicted_label == s.label)
                .collect();
            let mean =
                class.iter().map(|r| r.fisher_trace).sum::<f64>() / class.len() as f64;
            assert!((mean - s.mean_fisher_trace).abs() < 1e-9);
            assert!(s.fisher_trace_five_number.windows(2).all(|w| w[0] <= w[1]));
        }
        // Spectral bounds per row.
        let h = 3.0f64.min(3.0);
        for r in &reports {
            assert!(r.top_eigenvalue <= r.fisher_trace + 1e-9);
            assert!(r.top_eigenvalue >= r.fisher_trace / h - 1e-9);
        }
    }

    #[test]
    fn heatmap_of_constant_model() {
        let params = constant_model();
        let rows = heatmap_grid(&params, (-1.0, 1.0, -2.0, 2.0), 5).unwrap();
        assert_eq!(rows.len(), 25);
        for r in &rows {
            assert!((r.prob - 0.5).abs() < 1e-12);
            assert_eq!(r.trace, 0.0);
            assert!((r.entropy - std::f64::consts::LN_2).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&r.x));
            assert!((-2.0..=2.0).contains(&r.y));
        }
        assert_eq!(rows[0].x, -1.0);
        assert_eq!(rows[0].y, -2.0);
        assert_eq!(rows[24].x, 1.0);
        assert_eq!(rows[24].y, 2.0);
    }

    #[test]
    fn heatmap_entropy_stays_in_shannon_bounds() {
        let spec = MlpSpec::new(2, vec![8], 3);
        let params = init(&spec, 9).unwrap();
        let rows = heatmap_grid(&params, (-2.0, 2.0, -2.0, 2.0), 8).unwrap();
        assert_eq!(rows.len(), 64);
        let cap = (3.0f64).ln() + 1e-12;
        for r in &rows {
            assert!(r.entropy >= 0.0 && r.entropy <= cap, "entropy {}", r.entropy);
            assert!(r.trace >= 0.0);
            assert!((0.0..=1.0).contains(&r.prob));
        }
    }

    #[test]
    fn heatmap_rejects_non_planar_models() {
        let spec = MlpSpec::new(3, vec![4], 2);
        let params = init(&spec, 1).unwrap();
        assert!(heatmap_grid(&params, (-1.0, 1.0, -1.0, 1.0), 4).is_err());
        let params2 = constant_model();
        assert!(heatmap_grid(&params2, (1.0, -1.0, -1.0, 1.0), 4).is_err());
        assert!(heatmap_grid(&params2, (-1.0, 1.0, -1.0, 1.0), 1).is_err());
    }

    #[test]
    fn csv_outputs_have_contract_columns() {
        let params = constant_model();
        let ds = Dataset::new(
            Tensor::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
            None,
            "fixture",
        )
        .unwrap();
        let (reports, _) = stability_stats(&params, &ds).unwrap();
        let mut buf = Vec::new();
        write_stability_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("index,predicted_label,confidence,fisher_trace,top_eigenvalue"));

        let rows = heatmap_grid(&params, (-1.0, 1.0, -1.0, 1.0), 2).unwrap();
        let mut buf = Vec::new();
        write_heatmap_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,prob,trace,entropy"));
    }
}
